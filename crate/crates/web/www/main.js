// Expects the wasm-bindgen `--target web` output in ./pkg.
import init, { accounting, DemoSession } from "./pkg/freeboost_web.js";

const VARIANTS = ["baseline", "r-llm", "out-r-llm", "hybrid-r-llm", "mlp-control"];
const $ = (id) => document.getElementById(id);
let session = null;

function fillVariants(select, chosen) {
  for (const v of VARIANTS) select.add(new Option(v, v, false, v === chosen));
}

function showAccounting() {
  const table = $("acc-table");
  try {
    const acc = JSON.parse(accounting($("acc-variant").value, +$("acc-d").value, +$("acc-dllm").value));
    const row = (name, c) => `<tr><td>${name}</td><td>${c.total}</td><td>${c.trainable}</td><td>${c.frozen}</td></tr>`;
    table.innerHTML = "<tr><th>module</th><th>total</th><th>trainable</th><th>frozen</th></tr>" +
      Object.entries(acc.per_module).map(([m, c]) => row(m, c)).join("") + row("all", acc);
  } catch (e) {
    table.innerHTML = `<tr><td>${e.message}</td></tr>`;
  }
}

function log(line) {
  const el = $("log");
  el.textContent += line + "\n";
  el.scrollTop = el.scrollHeight;
}

function draw(canvas, rgba, side) {
  const off = new OffscreenCanvas(side, side);
  off.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), side, side), 0, 0);
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function newSession() {
  session?.free();
  const variant = $("train-variant").value;
  session = new DemoSession(variant, +$("train-n").value, 7n);
  $("log").textContent = "";
  log(`${variant}: ${session.n_test()} test images`);
  $("train-epoch").disabled = false;
  $("cam-run").disabled = false;
  $("cam-index").max = session.n_test() - 1;
}

function trainEpoch() {
  const btn = $("train-epoch");
  btn.disabled = true;
  // let the button repaint before the blocking epoch
  setTimeout(() => {
    const r = JSON.parse(session.train_epoch());
    const t = JSON.parse(session.test_metrics());
    log(`epoch ${r.epoch}  loss ${r.train_loss.toFixed(4)}  val acc ${r.val_acc?.toFixed(3)}  test acc ${t.acc.toFixed(3)}  test auc ${t.auc.toFixed(3)}`);
    btn.disabled = false;
  }, 10);
}

function explain() {
  const i = Math.min(+$("cam-index").value, session.n_test() - 1);
  draw($("cam-image"), session.sample_rgba(i, 1), 28);
  const out = session.gradcam_rgba(i, 4);
  draw($("cam-overlay"), out.subarray(0, out.length - 1), 28);
  $("cam-info").textContent = `label ${session.label(i)}, explained class ${out[out.length - 1]}`;
}

await init();
fillVariants($("acc-variant"), "r-llm");
fillVariants($("train-variant"), "r-llm");
for (const id of ["acc-variant", "acc-d", "acc-dllm"]) $(id).addEventListener("input", showAccounting);
$("train-new").addEventListener("click", newSession);
$("train-epoch").addEventListener("click", trainEpoch);
$("cam-run").addEventListener("click", explain);
showAccounting();
