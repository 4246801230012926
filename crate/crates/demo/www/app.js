import init, { tree_marginals, cwi_postprocess, evaluate_conllu } from "./pkg/morphosyn_demo.js";

const $ = (id) => document.getElementById(id);

function el(tag, attrs = {}, text) {
  const e = document.createElement(tag);
  Object.assign(e, attrs);
  if (text !== undefined) e.textContent = text;
  return e;
}

function showError(out, r) {
  out.replaceChildren(el("p", { className: "error" }, r.error));
}

function renderTree() {
  const temp = Math.pow(10, Number($("temp").value));
  $("temp-val").textContent = temp.toFixed(2);
  const out = $("tree-out");
  const r = JSON.parse(tree_marginals($("scores").value, temp));
  if (r.error) return showError(out, r);
  const table = el("table");
  const head = el("tr");
  head.append(el("th", {}, "head \\ dep"));
  for (let d = 1; d <= r.n; d++) head.append(el("th", {}, String(d)));
  table.append(head);
  r.marginals.forEach((row, h) => {
    const tr = el("tr");
    tr.append(el("th", {}, h === 0 ? "root" : String(h)));
    row.forEach((p, d) => {
      const td = el("td", {}, h === d + 1 ? "" : p.toFixed(3));
      td.style.background = `rgba(0, 102, 204, ${p.toFixed(3)})`;
      if (p > 0.5) td.style.color = "#fff";
      if (r.viterbi[d] === h) td.className = "best";
      tr.append(td);
    });
    table.append(tr);
  });
  const trees = r.trees === null ? "" : `, ${r.trees} projective trees`;
  out.replaceChildren(
    table,
    el("p", {}, `log Z = ${r.log_z.toFixed(4)}${trees}; best heads [${r.viterbi.join(", ")}], score ${r.viterbi_score.toFixed(3)}`),
  );
}

function renderCwi() {
  const out = $("cwi-out");
  let input;
  try {
    input = JSON.parse($("cwi").value);
  } catch (e) {
    return showError(out, { error: String(e) });
  }
  input.threshold = Number($("thr").value);
  const r = JSON.parse(cwi_postprocess(JSON.stringify(input)));
  if (r.error) return showError(out, r);
  const table = el("table");
  const tr = (cells, tag = "td") => {
    const row = el("tr");
    cells.forEach((c) => row.append(typeof c === "string" ? el(tag, {}, c) : c));
    return row;
  };
  table.append(tr(["form", "initial", "confidence", "final"], "th"));
  for (const t of r.tokens) {
    const fin = el("td", { className: t.label + (t.relabeled ? " flip" : "") }, t.label);
    table.append(tr([t.form, el("td", { className: t.initial }, t.initial), t.confidence.toFixed(2), fin]));
  }
  const note = r.fallback ? "No content word survived: the first token was promoted to the root." : "";
  out.replaceChildren(table, el("p", {}, note));
}

function renderEval() {
  const out = $("eval-out");
  const r = JSON.parse(evaluate_conllu($("gold").value, $("system").value));
  if (r.error) return showError(out, r);
  const table = el("table");
  const row = (cells, tag) => {
    const tr = el("tr");
    cells.forEach((c) => tr.append(el(tag, {}, c)));
    table.append(tr);
  };
  row(["metric", "P", "R", "F1", "TP", "FP", "FN"], "th");
  for (const [name, key] of [["MSLAS", "mslas"], ["LAS", "las"], ["Feats", "feats"]]) {
    const s = r[key];
    row([name, s.p.toFixed(1), s.r.toFixed(1), s.f1.toFixed(1), String(s.counts.tp), String(s.counts.fp), String(s.counts.fn)], "td");
  }
  out.replaceChildren(table);
}

await init();
for (const id of ["scores", "temp"]) $(id).addEventListener("input", renderTree);
for (const id of ["cwi", "thr"]) $(id).addEventListener("input", renderCwi);
for (const id of ["gold", "system"]) $(id).addEventListener("input", renderEval);
renderTree();
renderCwi();
renderEval();
