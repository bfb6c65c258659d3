// Wiring for the three panels. All numerics happen in the wasm module;
// this file only collects form values, parses the JSON responses, and
// draws on canvas.

import init, { flow_demo, blocks_demo, order_demo } from "./pkg/attnflow_demo.js";

const PALETTE = [
  "#5ab0f7", "#f7a65a", "#7de38a", "#f078c8", "#c9b458",
  "#58c9c9", "#b08af7", "#f07878", "#8fd14f", "#f7e15a",
];
const INK = "#d8dee6";
const DIM = "#8894a3";
const GRID = "#2b323c";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function setStatus(id, text, isError = false) {
  const el = $(id);
  el.textContent = text;
  el.classList.toggle("error", isError);
}

// ---------------------------------------------------------------- plotting

function frame(ctx, w, h) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = GRID;
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);
}

function axisLabel(ctx, text, x, y) {
  ctx.fillStyle = DIM;
  ctx.font = "11px system-ui";
  ctx.fillText(text, x, y);
}

// Polyline with padded linear axes; points are [x, y] pairs.
function linePlot(canvas, points, { xLabel, yLabel, color = PALETTE[0], marks = false }) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  frame(ctx, w, h);
  if (points.length === 0) return;

  const pad = 34;
  const xs = points.map((p) => p[0]);
  const ys = points.map((p) => p[1]);
  const span = (v) => [Math.min(...v), Math.max(...v)];
  const [x0, x1] = span(xs);
  const [y0, y1] = span(ys);
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const sy = (y) => h - pad - ((y - y0) / (y1 - y0 || 1)) * (h - 2 * pad);

  ctx.strokeStyle = color;
  ctx.lineWidth = 1.6;
  ctx.beginPath();
  points.forEach(([x, y], i) => (i ? ctx.lineTo(sx(x), sy(y)) : ctx.moveTo(sx(x), sy(y))));
  ctx.stroke();
  if (marks) {
    ctx.fillStyle = color;
    for (const [x, y] of points) {
      ctx.beginPath();
      ctx.arc(sx(x), sy(y), 2.6, 0, 2 * Math.PI);
      ctx.fill();
    }
  }
  axisLabel(ctx, xLabel, w - pad - 6 * xLabel.length, h - 10);
  axisLabel(ctx, yLabel, 8, 16);
  axisLabel(ctx, y1.toPrecision(3), 4, pad);
  axisLabel(ctx, y0.toPrecision(3), 4, h - pad);
}

// One animation frame of token positions inside fixed bounds.
function scatterFrame(canvas, tokens, groups, bounds) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  frame(ctx, w, h);
  if (!tokens) {
    axisLabel(ctx, "needs fi = 2", w / 2 - 34, h / 2);
    return;
  }
  const pad = 16;
  const [x0, x1, y0, y1] = bounds;
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const sy = (y) => h - pad - ((y - y0) / (y1 - y0 || 1)) * (h - 2 * pad);
  tokens.forEach(([x, y], i) => {
    const g = groups[i];
    ctx.fillStyle = g >= 0 ? PALETTE[g % PALETTE.length] : DIM;
    ctx.beginPath();
    ctx.arc(sx(x), sy(y), 5, 0, 2 * Math.PI);
    ctx.fill();
  });
}

function tokenBounds(frames) {
  let x0 = Infinity, x1 = -Infinity, y0 = Infinity, y1 = -Infinity;
  for (const f of frames)
    for (const [x, y] of f) {
      x0 = Math.min(x0, x); x1 = Math.max(x1, x);
      y0 = Math.min(y0, y); y1 = Math.max(y1, y);
    }
  return [x0, x1, y0, y1];
}

function logLogPlot(canvas, points, slope) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  frame(ctx, w, h);
  const pad = 40;
  const lp = points.map(([x, y]) => [Math.log10(x), Math.log10(y)]);
  const xs = lp.map((p) => p[0]);
  const ys = lp.map((p) => p[1]);
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const sy = (y) => h - pad - ((y - y0) / (y1 - y0 || 1)) * (h - 2 * pad);

  if (slope !== null) {
    // least-squares line in log space, anchored through the centroid
    const cx = xs.reduce((a, b) => a + b) / xs.length;
    const cy = ys.reduce((a, b) => a + b) / ys.length;
    ctx.strokeStyle = GRID;
    ctx.setLineDash([4, 4]);
    ctx.beginPath();
    ctx.moveTo(sx(x0), sy(cy + slope * (x0 - cx)));
    ctx.lineTo(sx(x1), sy(cy + slope * (x1 - cx)));
    ctx.stroke();
    ctx.setLineDash([]);
  }
  ctx.fillStyle = PALETTE[0];
  for (const [x, y] of lp) {
    ctx.beginPath();
    ctx.arc(sx(x), sy(y), 4, 0, 2 * Math.PI);
    ctx.fill();
  }
  axisLabel(ctx, "log10 h", w - pad - 44, h - 10);
  axisLabel(ctx, "log10 error", 8, 16);
}

// ------------------------------------------------------- trajectory panels

// Flow and blocks share a response shape; this hooks one panel's form,
// loss plot, scatter replay, and scrub slider to a demo call.
function trajectoryPanel(prefix, call, request, { animate, xLabel }) {
  let frames = null, groups = null, bounds = null, timer = null;

  const show = (i) => scatterFrame($(`${prefix}-tokens`), frames && frames[i], groups, bounds);

  const play = () => {
    if (timer) cancelAnimationFrame(timer);
    let i = 0, last = 0;
    const tick = (now) => {
      if (now - last > 1000 / 30) {
        last = now;
        $(`${prefix}-frame`).value = i;
        show(i);
        i += 1;
      }
      if (frames && i < frames.length) timer = requestAnimationFrame(tick);
    };
    timer = requestAnimationFrame(tick);
  };

  $(`${prefix}-run`).addEventListener("click", () => {
    const button = $(`${prefix}-run`);
    button.disabled = true;
    try {
      const response = JSON.parse(call(JSON.stringify(request())));
      const curve = response.curve;
      linePlot(
        $(`${prefix}-loss`),
        curve.map((p) => [p.step, p.ce]),
        { xLabel, yLabel: "ce", marks: curve.length <= 64 },
      );
      frames = response.tokens;
      groups = response.token_groups;
      bounds = frames ? tokenBounds(frames) : null;
      const slider = $(`${prefix}-frame`);
      slider.max = frames ? frames.length - 1 : 0;
      slider.value = 0;
      const note = response.diverged_at === null
        ? `ce ${curve[0].ce.toPrecision(4)} → ${curve.at(-1).ce.toPrecision(4)} over ${curve.length - 1} steps`
        : `diverged at step ${response.diverged_at}; showing the finite prefix`;
      setStatus(`${prefix}-status`, note, response.diverged_at !== null);
      if (frames && animate) play();
      else show(frames ? frames.length - 1 : 0);
    } catch (e) {
      setStatus(`${prefix}-status`, String(e), true);
    } finally {
      button.disabled = false;
    }
  });

  $(`${prefix}-frame`).addEventListener("input", (e) => {
    if (timer) cancelAnimationFrame(timer);
    show(Number(e.target.value));
  });
}

function dims(prefix) {
  return { s: num(`${prefix}-s`), fi: num(`${prefix}-fi`), fo: num(`${prefix}-fo`) };
}

await init();

trajectoryPanel("flow", flow_demo, () => ({
  seed: num("flow-seed"),
  ...dims("flow"),
  model: $("flow-model").value,
  method: $("flow-method").value,
  h: num("flow-h"),
  steps: num("flow-steps"),
  theta_scale: num("flow-scale"),
}), { animate: true, xLabel: "step" });

trajectoryPanel("blocks", blocks_demo, () => ({
  seed: num("blocks-seed"),
  ...dims("blocks"),
  model: $("blocks-model").value,
  depth: num("blocks-depth"),
  h: num("blocks-h"),
  theta_scale: num("blocks-scale"),
}), { animate: false, xLabel: "layer" });

$("order-run").addEventListener("click", () => {
  try {
    const response = JSON.parse(order_demo(JSON.stringify({
      seed: num("order-seed"),
      ...dims("order"),
      model: $("order-model").value,
      t: num("order-t"),
      h_values: $("order-h").value.split(",").map(Number),
    })));
    logLogPlot($("order-plot"), response.points, response.slope);
    setStatus(
      "order-status",
      response.slope === null
        ? "degenerate errors; no slope to fit"
        : `fitted slope ≈ ${response.slope.toFixed(3)}`,
    );
  } catch (e) {
    setStatus("order-status", String(e), true);
  }
});
