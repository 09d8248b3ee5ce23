// Edits arrive as [start, end, replacement, type] tuples.
import init, { dispatch, random_gates, edits, score_sentence } from "./pkg/moece_web.js";

const $ = (id) => document.getElementById(id);

function show(id, fn) {
  try {
    $(id).innerHTML = fn();
  } catch (e) {
    $(id).innerHTML = `<p class="error">${String(e)}</p>`;
  }
}

function table(head, rows) {
  const h = head.map((x) => `<th>${x}</th>`).join("");
  return `<table><tr>${h}</tr>${rows.join("")}</table>`;
}

function renderDispatch() {
  const v = JSON.parse(dispatch($("gates").value, $("variant").value, Number($("cf").value),
    $("second").value, Number($("seed").value)));
  const tokens = v.choices.map((cs, i) => {
    const cells = cs.map((c) => `<td class="${c.overflow ? "overflow" : "kept"}">e${c.expert} g=${c.gate.toFixed(3)} w=${c.weight.toFixed(3)}</td>`);
    while (cells.length < v.top_k) cells.push("<td></td>");
    return `<tr><td>${i}</td>${cells.join("")}</tr>`;
  });
  const experts = v.load.map((l, e) => {
    const bar = v.capacity ? Math.round((100 * l) / Math.max(v.capacity, 1)) : l * 10;
    return `<tr><td>e${e}</td><td>${l}<span class="bar" style="width:${bar}px"></span></td><td>${v.w[e].toFixed(3)}</td><td>${v.v[e].toFixed(3)}</td></tr>`;
  });
  const head = ["token"].concat(Array.from({ length: v.top_k }, (_, k) => `choice ${k + 1}`));
  return `<p>capacity per expert: <code>${v.capacity ?? "unlimited"}</code>,
    dropped tokens: <code>${v.dropped_tokens}</code>, overflowed assignments: <code>${v.overflow_assignments}</code>,
    balance loss: <code>${v.balance_loss.toFixed(4)}</code> (1 is perfectly balanced, ${v.experts} is fully collapsed)</p>`
    + table(head, tokens) + table(["expert", "kept load", "w (assigned share)", "v (mean gate)"], experts);
}

function renderEdits() {
  const v = JSON.parse(edits($("src").value, $("tgt").value));
  const rows = v.edits.map(([start, end, rep, type]) => `<tr><td>${start}</td><td>${end}</td><td>${v.source.slice(start, end).join(" ")}</td><td>${rep || "∅"}</td><td>${type}</td></tr>`);
  return table(["start", "end", "source span", "replacement", "type"], rows)
    + `<p>edits reproduce the target: <code>${v.round_trip}</code></p>`;
}

function renderScore() {
  const v = JSON.parse(score_sentence($("s-src").value, $("s-hyp").value, $("s-ref").value));
  const list = (es) => es.map(([start, end, rep, type]) => `(${start}, ${end}, '${rep}') ${type}`).join("<br>") || "none";
  return table(["system edits", "reference edits"], [`<tr><td>${list(v.hypothesis_edits)}</td><td>${list(v.gold_edits)}</td></tr>`])
    + `<p>TP ${v.tp}, FP ${v.fp}, FN ${v.fn_}: P ${v.precision.toFixed(3)}, R ${v.recall.toFixed(3)}, F0.5 <code>${v.f05.toFixed(3)}</code></p>`;
}

await init();
$("status").textContent = "";
$("plan").onclick = () => show("dispatch-out", renderDispatch);
$("randomize").onclick = () => {
  $("gates").value = random_gates(Number($("rn").value), Number($("rm").value), Number($("rs").value), Number($("seed").value));
  show("dispatch-out", renderDispatch);
};
$("extract").onclick = () => show("edits-out", renderEdits);
$("score").onclick = () => show("score-out", renderScore);
show("dispatch-out", renderDispatch);
show("edits-out", renderEdits);
show("score-out", renderScore);
