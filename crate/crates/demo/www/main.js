import init, { compress_preview, cost_grid, training_curve } from "./pkg/gradcomp_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function report(el, f) {
  try {
    f();
  } catch (e) {
    el.innerHTML = `<span class="err">${e.message ?? e}</span>`;
  }
}

function axes(ctx, w, h) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(40, 10);
  ctx.lineTo(40, h - 20);
  ctx.lineTo(w - 10, h - 20);
  ctx.stroke();
}

function bars(canvas, series) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  axes(ctx, w, h);
  const n = series[0].values.length;
  const max = Math.max(1e-12, ...series.flatMap((s) => s.values.map(Math.abs)));
  const mid = (h - 30) / 2 + 10;
  const step = (w - 50) / n;
  for (const s of series) {
    ctx.fillStyle = s.color;
    s.values.forEach((v, i) => {
      const len = (v / max) * ((h - 30) / 2);
      ctx.fillRect(42 + i * step, Math.min(mid, mid - len), Math.max(1, step * 0.8), Math.abs(len));
    });
  }
}

function line(canvas, values, color) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  axes(ctx, w, h);
  const lo = Math.min(...values), hi = Math.max(...values);
  const y = (v) => 10 + (1 - (v - lo) / Math.max(hi - lo, 1e-12)) * (h - 30);
  const x = (i) => 40 + (i / Math.max(values.length - 1, 1)) * (w - 50);
  ctx.strokeStyle = color;
  ctx.beginPath();
  values.forEach((v, i) => (i ? ctx.lineTo(x(i), y(v)) : ctx.moveTo(x(i), y(v))));
  ctx.stroke();
  ctx.fillStyle = "#444";
  ctx.fillText(hi.toFixed(3), 2, 14);
  ctx.fillText(lo.toFixed(3), 2, h - 22);
}

function preview() {
  report($("p-info"), () => {
    const p = JSON.parse(compress_preview($("p-method").value, num("p-value"), num("p-n"), BigInt(num("p-seed"))));
    $("p-info").textContent =
      `${p.bits} bits vs ${p.dense_bits} dense (${p.ratio.toFixed(2)}x). ` +
      "grey: gradient, blue: transmitted, red: kept in residual";
    bars($("p-plot"), [
      { values: p.original, color: "#ccc" },
      { values: p.residual, color: "#d55" },
      { values: p.transmitted, color: "#36c" },
    ]);
  });
}

function costs() {
  report($("c-table"), () => {
    const rows = JSON.parse(cost_grid(num("c-n"), num("c-bw")));
    const body = rows
      .map((r) => `<tr><td>${r.method}</td><td>${r.setting}</td><td>${r.bits}</td>` +
        `<td>${r.ratio.toFixed(1)}</td><td>${r.comm_ms.toPrecision(4)}</td></tr>`)
      .join("");
    $("c-table").innerHTML =
      "<table><tr><th>method</th><th>keep / levels</th><th>bits</th><th>ratio</th><th>exchange ms</th></tr>" +
      body + "</table>";
  });
}

function curve() {
  report($("t-info"), () => {
    const c = JSON.parse(training_curve($("t-method").value, num("t-value"), num("t-workers"),
      num("t-lr"), num("t-epochs"), 7n));
    const comm = c.comm_seconds.reduce((a, b) => a + b, 0);
    $("t-info").textContent = (c.diverged ? "diverged. " : "") +
      `validation CE ${c.val_ce.at(-1)?.toFixed(4)} after ${c.val_ce.length} epochs, ` +
      `${(comm * 1e3).toFixed(3)} ms communication, ${c.bits_sent.at(-1)} bits sent`;
    line($("t-plot"), c.val_ce, "#36c");
  });
}

await init();
$("p-go").onclick = preview;
$("c-go").onclick = costs;
$("t-go").onclick = curve;
preview();
costs();
curve();
