import init, { counterTimeline, costCurves, parenthesization } from "./pkg/psm_wasm.js";

const $ = (id) => document.getElementById(id);

function guarded(fn) {
  return () => {
    $("error").textContent = "";
    try {
      fn();
    } catch (e) {
      $("error").textContent = String(e.message ?? e);
    }
  };
}

function cell(tag, text, cls) {
  const el = document.createElement(tag);
  if (text !== undefined) el.textContent = text;
  if (cls) el.className = cls;
  return el;
}

function renderTimeline() {
  const steps = JSON.parse(counterTimeline(Number($("tl-n").value)));
  const width = Math.max(...steps.map((s) => s.slots.length));
  const table = $("tl-out");
  table.replaceChildren();
  const head = cell("tr");
  for (const h of ["t", "inserts", "emits", "slots (high to low)"]) head.append(cell("th", h));
  table.append(head);
  for (const s of steps) {
    const row = cell("tr");
    row.append(cell("td", s.t), cell("td", s.insert_calls), cell("td", s.emit_calls));
    const slots = cell("td");
    for (let k = width - 1; k >= 0; k--) slots.append(cell("span", undefined, "slot " + (s.slots[k] ? "on" : "off")));
    row.append(slots);
    table.append(row);
  }
}

function renderCosts() {
  const pts = JSON.parse(costCurves(Number($("cc-c").value), Number($("cc-d").value), Number($("cc-n").value)));
  const canvas = $("cc-plot");
  const ctx = canvas.getContext("2d");
  const pad = 40;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  const tMax = pts[pts.length - 1].t;
  const yMax = Math.max(...pts.map((p) => Math.max(p.psm, p.baseline)));
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  const line = (key, colour) => {
    ctx.strokeStyle = colour;
    ctx.beginPath();
    pts.forEach((p, i) => {
      const x = pad + (p.t / tMax) * w;
      const y = pad + h - (p[key] / yMax) * h;
      i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
    });
    ctx.stroke();
  };
  line("baseline", "#b5442a");
  line("psm", "#3572a5");
  ctx.fillStyle = "#222";
  ctx.fillText("flops per token (red: KV-cache baseline, blue: PSM)", pad, pad - 10);
  ctx.fillText(`t = ${tMax}`, pad + w - 50, pad + h + 20);
  const last = pts[pts.length - 1];
  $("cc-note").textContent =
    `at t=${last.t}: PSM ${last.psm.toExponential(3)}, baseline ${last.baseline.toExponential(3)}, ` +
    `counter roots ${last.roots}`;
}

function renderBrackets() {
  const rows = JSON.parse(parenthesization(Number($("pz-n").value)));
  const table = $("pz-out");
  table.replaceChildren();
  const head = cell("tr");
  for (const h of ["t", "static tree", "online counter", ""]) head.append(cell("th", h));
  table.append(head);
  for (const r of rows) {
    const row = cell("tr");
    row.append(cell("td", r.t), cell("td", r.tree), cell("td", r.online));
    row.append(cell("td", r.equal ? "=" : "differs", r.equal ? "" : "bad"));
    table.append(row);
  }
}

await init();
$("tl-run").onclick = guarded(renderTimeline);
$("cc-run").onclick = guarded(renderCosts);
$("pz-run").onclick = guarded(renderBrackets);
guarded(renderTimeline)();
guarded(renderCosts)();
guarded(renderBrackets)();
