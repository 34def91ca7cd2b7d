import init, { BlendDemo, dfa_scatter, auc } from "./pkg/deepshield_web.js";

const $ = (id) => document.getElementById(id);
const SIZE = 64;
const FRAMES = 6;
const GRID = 8;
let demo = null;

function showError(e) {
  $("error").textContent = String(e);
}

function paint(canvas, rgba) {
  const off = new OffscreenCanvas(SIZE, SIZE);
  off.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), SIZE, SIZE), 0, 0);
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  return ctx;
}

function drawBlend() {
  const t = Number($("frame").value);
  const theta = Number($("theta").value);
  $("frame-v").textContent = t;
  $("theta-v").textContent = theta;
  paint($("orig"), demo.original_rgba(t));
  paint($("blend"), demo.blended_rgba(t));
  const ctx = paint($("mask"), demo.mask_rgba(t));
  const labels = demo.patch_labels(t, GRID, theta);
  const cell = $("mask").width / GRID;
  ctx.strokeStyle = "rgba(220, 40, 40, 0.9)";
  ctx.lineWidth = 2;
  labels.forEach((l, i) => {
    if (l) ctx.strokeRect((i % GRID) * cell + 1, Math.floor(i / GRID) * cell + 1, cell - 2, cell - 2);
  });
}

function rebuild() {
  try {
    demo?.free();
    demo = new BlendDemo(Number($("seed").value) >>> 0, SIZE, FRAMES);
    $("params").textContent = JSON.stringify(JSON.parse(demo.params_json()), null, 2);
    drawBlend();
  } catch (e) {
    showError(e);
  }
}

function drawScatter() {
  const lambda = Number($("lambda").value);
  const alpha = Number($("alpha").value);
  $("lambda-v").textContent = lambda;
  $("alpha-v").textContent = alpha;
  const pts = JSON.parse(dfa_scatter(7, 120, lambda, alpha));
  const canvas = $("scatter");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const sx = (x) => ((x + 3) / 6) * canvas.width;
  const sy = (y) => canvas.height - ((y + 2.5) / 5) * canvas.height;
  const colors = { a: "#1f77b4", b: "#ff7f0e", dfg: "#2ca02c", bfg: "#d62728" };
  for (const [key, color] of Object.entries(colors)) {
    ctx.fillStyle = color;
    for (const [x, y] of pts[key]) {
      ctx.beginPath();
      ctx.arc(sx(x), sy(y), 2.5, 0, 2 * Math.PI);
      ctx.fill();
    }
  }
}

function computeAuc() {
  const scores = [];
  const labels = [];
  for (const line of $("scores").value.split("\n")) {
    const parts = line.trim().split(/\s+/);
    if (parts.length !== 2) continue;
    scores.push(Number(parts[0]));
    labels.push(Number(parts[1]) ? 1 : 0);
  }
  try {
    $("auc-v").textContent = auc(new Float64Array(scores), new Uint8Array(labels)).toFixed(4);
  } catch (e) {
    $("auc-v").textContent = String(e);
  }
}

await init();
$("seed").addEventListener("change", rebuild);
$("frame").addEventListener("input", drawBlend);
$("theta").addEventListener("input", drawBlend);
$("lambda").addEventListener("input", drawScatter);
$("alpha").addEventListener("input", drawScatter);
$("scores").addEventListener("input", computeAuc);
rebuild();
drawScatter();
computeAuc();
