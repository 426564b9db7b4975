import init, { planLayout, renderLayers, costSweep } from "./pkg/art_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
let layoutJson = null;

function report(err) {
  $("error").textContent = err ? String(err.message ?? err) : "";
}

function draw() {
  const w = num("width"), h = num("height");
  const bytes = renderLayers(layoutJson, w, h, num("seed"));
  const canvas = $("image");
  canvas.width = w;
  canvas.height = h;
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(bytes), w, h), 0, 0);
  if (!$("outlines").checked) return;
  ctx.font = "12px monospace";
  for (const r of JSON.parse(layoutJson).slice(1)) {
    const x = r.x - Math.ceil(r.width / 2), y = r.y - Math.ceil(r.height / 2);
    ctx.strokeStyle = "#fff";
    ctx.strokeRect(x + 0.5, y + 0.5, r.width - 1, r.height - 1);
    ctx.fillStyle = "#000";
    ctx.fillText(String(r.layer), x + 3, y + 13);
  }
}

function doPlan() {
  layoutJson = planLayout(num("width"), num("height"), num("elements"), num("seed"), $("template").value);
  $("layout").textContent = JSON.stringify(JSON.parse(layoutJson), null, 1);
  draw();
}

function doSweep() {
  const csv = costSweep($("scheme").value, num("kfrom"), num("kto"), num("region"));
  $("csv").textContent = csv;
  const rows = csv.trim().split("\n").slice(1).map((l) => l.split(",").map(Number));
  const canvas = $("chart"), ctx = canvas.getContext("2d");
  const pad = 40, w = canvas.width - 2 * pad, h = canvas.height - 2 * pad;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const ks = rows.map((r) => r[0]), pairs = rows.map((r) => r[2]);
  const k0 = Math.min(...ks), k1 = Math.max(...ks), top = Math.max(...pairs);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#000";
  ctx.font = "11px monospace";
  ctx.fillText(`pairs (max ${top.toExponential(2)})`, pad, pad - 8);
  ctx.fillText(`K ${k0}..${k1}`, pad + w - 60, pad + h + 16);
  ctx.strokeStyle = "#06c";
  ctx.beginPath();
  rows.forEach(([k, , p], i) => {
    const x = pad + (k1 === k0 ? 0 : ((k - k0) / (k1 - k0)) * w);
    const y = pad + h - (p / top) * h;
    i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
  });
  ctx.stroke();
}

function guarded(fn) {
  return () => {
    try {
      fn();
      report(null);
    } catch (e) {
      report(e);
    }
  };
}

await init();
$("plan").onclick = guarded(doPlan);
$("render").onclick = guarded(() => layoutJson && draw());
$("sweep").onclick = guarded(doSweep);
guarded(doPlan)();
guarded(doSweep)();
