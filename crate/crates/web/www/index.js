import init, { decay_weights, credit_curve, surrogate_curve } from "./pkg/fipo_web.js";

const $ = (id) => document.getElementById(id);

function plot(canvas, series, opts = {}) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 36;
  ctx.clearRect(0, 0, w, h);
  const all = series.flatMap((s) => s.ys.filter(Number.isFinite));
  let lo = Math.min(opts.yMin ?? Infinity, ...all), hi = Math.max(opts.yMax ?? -Infinity, ...all);
  if (hi - lo < 1e-9) { lo -= 1; hi += 1; }
  const n = Math.max(...series.map((s) => s.ys.length));
  const xs = opts.xs ?? [...Array(n).keys()];
  const x0 = xs[0], x1 = xs[xs.length - 1] || 1;
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const sy = (y) => h - pad - ((y - lo) / (hi - lo)) * (h - 2 * pad);
  ctx.strokeStyle = "#000"; ctx.lineWidth = 1;
  ctx.beginPath(); ctx.moveTo(pad, pad / 2); ctx.lineTo(pad, h - pad); ctx.lineTo(w - pad / 2, h - pad); ctx.stroke();
  if (lo < 0 && hi > 0) {
    ctx.strokeStyle = "#ddd"; ctx.beginPath(); ctx.moveTo(pad, sy(0)); ctx.lineTo(w - pad / 2, sy(0)); ctx.stroke();
  }
  ctx.fillStyle = "#000"; ctx.font = "11px sans-serif";
  ctx.fillText(hi.toPrecision(3), 2, sy(hi) + 4);
  ctx.fillText(lo.toPrecision(3), 2, sy(lo));
  ctx.fillText(String(+x0.toPrecision(3)), pad, h - pad + 14);
  ctx.fillText(String(+x1.toPrecision(3)), w - pad - 10, h - pad + 14);
  if (opts.xLabel) ctx.fillText(opts.xLabel, w / 2, h - 6);
  for (const s of series) {
    ctx.strokeStyle = s.color; ctx.fillStyle = s.color; ctx.lineWidth = 2;
    if (s.bars) {
      const bw = Math.max(1, (w - 2 * pad) / n - 1);
      s.ys.forEach((y, i) => { if (y) ctx.fillRect(sx(xs[i]) - bw / 2, sy(Math.max(y, 0)), bw, Math.abs(sy(y) - sy(0))); });
      continue;
    }
    ctx.beginPath();
    s.ys.forEach((y, i) => (i ? ctx.lineTo(sx(xs[i]), sy(y)) : ctx.moveTo(sx(xs[i]), sy(y))));
    ctx.stroke();
  }
}

function pattern(kind, len = 64) {
  const d = new Float64Array(len);
  for (let t = 0; t < len; t++) {
    if (kind === "spike") d[t] = t === 48 ? 0.4 : 0.01;
    if (kind === "ramp") d[t] = 0.004 * t;
    if (kind === "wave") d[t] = 0.15 * Math.sin(t / 4);
    if (kind === "outlier") d[t] = t === 40 ? 3.0 : 0.02;
  }
  return d;
}

function drawDecay() {
  const inf = $("decay-inf").checked;
  const tau = inf ? 1e9 : +$("decay-tau").value;
  $("decay-tau-v").textContent = inf ? "∞" : tau;
  plot($("decay"), [{ ys: Array.from(decay_weights(tau, 256)), color: "#1f77b4" }], { yMin: 0, yMax: 1, xLabel: "tokens ahead" });
}

function drawCredit() {
  const tau = +$("credit-tau").value;
  $("credit-tau-v").textContent = tau;
  const delta = pattern($("pattern").value);
  try {
    const out = credit_curve(delta, tau, +$("safety").value, +$("f-lo").value, +$("f-hi").value, +$("adv").value);
    const n = delta.length;
    plot($("credit"), [
      { ys: Array.from(delta), color: "#999", bars: true },
      { ys: Array.from(out.slice(0, n)), color: "#1f77b4" },
      { ys: Array.from(out.slice(n, 2 * n)), color: "#d62728" },
      { ys: Array.from(out.slice(2 * n)).map((m) => m * 0.5), color: "#2ca02c", bars: true },
    ], { xLabel: "token position" });
    $("credit-err").textContent = "";
  } catch (e) {
    $("credit-err").textContent = String(e);
  }
}

function drawSurrogate() {
  const pts = 201, rMax = 4;
  try {
    const ys = surrogate_curve(+$("s-adv").value, +$("eps-low").value, +$("eps-high").value, +$("dual-c").value, 0, rMax, pts);
    const xs = [...Array(pts).keys()].map((i) => (i * rMax) / (pts - 1));
    plot($("surrogate"), [{ ys: Array.from(ys), color: "#1f77b4" }], { xs, xLabel: "ratio r" });
    $("surrogate-err").textContent = "";
  } catch (e) {
    $("surrogate-err").textContent = String(e);
  }
}

await init();
for (const id of ["decay-tau", "decay-inf"]) $(id).addEventListener("input", drawDecay);
for (const id of ["pattern", "credit-tau", "safety", "f-lo", "f-hi", "adv"]) $(id).addEventListener("input", drawCredit);
for (const id of ["s-adv", "eps-low", "eps-high", "dual-c"]) $(id).addEventListener("input", drawSurrogate);
drawDecay();
drawCredit();
drawSurrogate();
