// Built with: wasm-pack build crates/web --target web --out-dir www/pkg
import init, { scene_images, caption_scene, explore_fusion, order_diversity } from "./pkg/gibbscap_web.js";

const $ = (id) => document.getElementById(id);
const fmt = (x) => x.toFixed(4);

function fail(el, err) {
  el.className = "error";
  el.textContent = String(err);
}

function table(headers, rows, chosen) {
  const head = "<tr>" + headers.map((h) => `<th>${h}</th>`).join("") + "</tr>";
  const body = rows
    .map((r, i) => `<tr class="${i === chosen ? "chosen" : ""}">` + r.map((c) => `<td>${c}</td>`).join("") + "</tr>")
    .join("");
  return head + body;
}

function showCaption(view) {
  $("caption-out").className = "result";
  $("caption-out").textContent = view.caption;
  $("steps").innerHTML = view.iterations
    .map((it, n) => {
      const steps = it.steps
        .map((s) => {
          const chosen = s.candidates.findIndex((c) => c.word === s.chosen);
          const rows = s.candidates.map((c) => [c.word, fmt(c.p_bert), fmt(c.p_clip), fmt(c.p_cls), fmt(c.fused)]);
          return `<details><summary>slot ${s.position}: ${s.chosen}</summary><table>${table(
            ["word", "fluency", "match", "control", "fused"], rows, chosen)}</table></details>`;
        })
        .join("");
      const mark = n === view.best_iteration ? " (best)" : "";
      return `<details><summary>iteration ${n}: ${it.text} [${fmt(it.score)}]${mark}</summary>${steps}</details>`;
    })
    .join("");
}

function runCaption(ev) {
  ev?.preventDefault();
  const f = new FormData($("caption-form"));
  try {
    const view = JSON.parse(caption_scene(f.get("image"), +f.get("length"), +f.get("k"), +f.get("iters"),
      BigInt(f.get("seed")), f.get("order"), f.get("control")));
    showCaption(view);
  } catch (e) {
    fail($("caption-out"), e);
    $("steps").innerHTML = "";
  }
}

function runFusion() {
  const f = new FormData($("fusion-form"));
  const out = $("fusion-out");
  try {
    const v = JSON.parse(explore_fusion(f.get("pbert"), f.get("scores"), +f.get("alpha"), +f.get("beta"), +f.get("temp")));
    const pb = f.get("pbert").split(",").map(Number);
    const rows = v.fused.map((x, i) => [i, fmt(pb[i]), fmt(v.p_clip[i]), fmt(x)]);
    out.className = "";
    out.innerHTML = table(["candidate", "fluency", "match softmax", "fused"], rows, v.chosen);
  } catch (e) {
    fail(out, e);
  }
}

function runDiversity(ev) {
  ev.preventDefault();
  const c = new FormData($("caption-form"));
  const orders = BigInt(new FormData($("diversity-form")).get("orders"));
  const out = $("diversity-out");
  try {
    const v = JSON.parse(order_diversity(c.get("image"), +c.get("length"), +c.get("k"), +c.get("iters"), orders));
    out.className = "";
    out.innerHTML = `<p>left to right: <b>${v.sequential}</b></p><ol start="0">` +
      v.shuffled.map((s) => `<li>${s}</li>`).join("") +
      `</ol><p>Div-1 ${fmt(v.div_1)}, Div-2 ${fmt(v.div_2)}</p>`;
  } catch (e) {
    fail(out, e);
  }
}

await init();
$("image").innerHTML = JSON.parse(scene_images()).map((n) => `<option>${n}</option>`).join("");
$("caption-form").addEventListener("submit", runCaption);
$("fusion-form").addEventListener("input", runFusion);
$("diversity-form").addEventListener("submit", runDiversity);
runCaption();
runFusion();
