import init, { two_word, text_metrics, DemoTrainer } from "./pkg/textkd_web.js";

const $ = (id) => document.getElementById(id);
const fmt = (v) => (v === null ? "n/a" : v.toFixed(4));

function show(el, f) {
  el.classList.remove("err");
  try {
    el.textContent = f();
  } catch (e) {
    el.classList.add("err");
    el.textContent = String(e);
  }
}

await init();

$("radius").oninput = () => ($("radius-out").value = Number($("radius").value).toFixed(2));

$("tw-run").onclick = () =>
  show($("tw-result"), () => {
    const rows = JSON.parse(two_word(Number($("radius").value), Number($("tw-steps").value), 0n));
    return rows
      .map((r) => `${r.geometry.padEnd(22)} accuracy ${fmt(r.accuracy)}   best possible ${fmt(r.bayes_accuracy)}`)
      .join("\n");
  });

$("m-run").onclick = () =>
  show($("m-result"), () => {
    const m = JSON.parse(text_metrics($("cands").value, $("refs").value, $("char-level").checked));
    const bleu = m.bleu.map(([n, v]) => `BLEU-${n} ${fmt(v)}`).join("   ");
    const jsd = m.jsd.map(([n, v]) => `JSD-${n} ${fmt(v)}`).join("   ");
    return `${bleu}\n${jsd}  (nats)`;
  });

let trainer = null;
let running = false;

function reset() {
  trainer?.free();
  trainer = null;
  show($("t-result"), () => {
    trainer = new DemoTrainer($("corpus").value, $("mode").value, 0n);
    return "ready";
  });
}

function advance(n) {
  if (!trainer) return false;
  let ok = true;
  show($("t-result"), () => {
    try {
      const p = JSON.parse(trainer.step(n));
      const losses = [`L_D ${fmt(p.l_d)}`, `L_G ${fmt(p.l_g)}`];
      if (p.l_ae !== null) losses.unshift(`L_AE ${fmt(p.l_ae)}`);
      return `iteration ${p.iteration}   ${losses.join("   ")}   JSD-1 ${fmt(p.jsd1)}\n\n${p.samples.join("\n")}`;
    } catch (e) {
      ok = false;
      throw e;
    }
  });
  return ok;
}

function loop() {
  if (!running) return;
  if (!advance(2)) {
    running = false;
    return;
  }
  requestAnimationFrame(loop);
}

$("t-new").onclick = reset;
$("mode").onchange = reset;
$("t-step").onclick = () => advance(10);
$("t-run").onclick = () => {
  running = !running;
  loop();
};
reset();
