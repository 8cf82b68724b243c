"""End-to-end pipeline: model assembly, two-stage training, prediction,
evaluation, and the ablation variants.

Training runs in two stages. Stage 1 fits the enhancer on degraded/clean
pairs with the attenuation penalty. Stage 2 freezes it, pushes every train
image through it once, extracts handcrafted vectors, and then trains the
embedder, fusion, and both classifier heads jointly by SGD on the summed
binary + severity cross-entropies.

Variant flags (baked into the bundle at train time, or toggled at inference
for the ablation sweep):
    use_enhance    off = the degraded image feeds the embedder directly
    use_hffn       off = no handcrafted path, the deep vector alone is fused
    use_multistage off = severity is the plain argmax over all five classes
"""

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import bundle as bd
from . import classifier as cl
from . import embedder as em
from . import enhance as en
from . import fusion as fu
from . import metrics as mx
from .config import CONFIG_KEYS, RunConfig
from .features import HANDCRAFTED_DIM, handcrafted_vector
from .imaging import Image, dequantize, load_pnm, resize_bilinear, to_grayscale
from .synth import read_manifest

VARIANTS = ["full", "no_enhance", "no_hffn", "no_multistage"]

_FLAG_BLOCKS = {"cfg.use_enhance": "use_enhance",
                "cfg.use_hffn": "use_hffn",
                "cfg.use_multistage": "use_multistage"}


@dataclass
class Model:
    params: dict
    config: RunConfig
    use_enhance: bool = True
    use_hffn: bool = True
    use_multistage: bool = True

    def variant(self, name: str) -> "Model":
        """Same weights, one Table-style toggle applied at inference."""
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}")
        flags = {}
        if name != "full":
            flags["use_" + name.removeprefix("no_")] = False
        return dataclasses.replace(self, **flags)


def expected_shapes(resolution: int = 96) -> dict:
    """Block name -> shape for the fixed architecture (config echo excluded)."""
    shapes = {
        "enh.w0": (3, 3, 1, 16), "enh.b0": (16,),
        "enh.w1": (3, 3, 16, 16), "enh.b1": (16,),
        "enh.w2": (3, 3, 16, 1), "enh.b2": (1,),
        "enh.mu_scale": (),
        "emb.stem_w": (3, 3, 3, 8), "emb.stem_b": (8,),
        "emb.final_w": (3, 3, 8, em.N_MAPS), "emb.final_b": (em.N_MAPS,),
        "emb.proj_w": (2 * em.N_MAPS, em.D_DEEP), "emb.proj_b": (em.D_DEEP,),
        "fus.hand_mu": (HANDCRAFTED_DIM,),
        "fus.hand_scale": (HANDCRAFTED_DIM,),
        "fus.p_deep": (em.D_DEEP, fu.D_MODEL),
        "fus.p_hand": (HANDCRAFTED_DIM, fu.D_MODEL),
        "cls.hidden_w": (fu.D_MODEL, cl.HIDDEN), "cls.hidden_b": (cl.HIDDEN,),
        "cls.bin_w": (cl.HIDDEN, 1), "cls.bin_b": (1,),
        "cls.multi_w": (cl.HIDDEN, cl.N_CLASSES), "cls.multi_b": (cl.N_CLASSES,),
    }
    for blk in (1, 2):
        for conv in (1, 2):
            shapes[f"emb.r{blk}c{conv}_w"] = (3, 3, 8, 8)
            shapes[f"emb.r{blk}c{conv}_b"] = (8,)
    for name in ("w_q", "w_k", "w_v", "w_o"):
        shapes[f"fus.{name}"] = (fu.D_MODEL, fu.D_MODEL)
    return shapes


def init_model(config: RunConfig = None, use_enhance=True, use_hffn=True,
               use_multistage=True) -> Model:
    cfg = config or RunConfig()
    params = {}
    params.update(en.init_enhancer(1, cfg.seed))
    params.update(em.init_embedder(cfg.seed))
    params.update(fu.init_fusion(cfg.seed))
    params.update(cl.init_classifier(cfg.seed))
    return Model(params=params, config=cfg, use_enhance=use_enhance,
                 use_hffn=use_hffn, use_multistage=use_multistage)


# ---------------------------------------------------------------------------
# persistence: parameters plus a cfg.* echo in one bundle

def save_model(model: Model, path):
    blocks = dict(model.params)
    for key, value in model.config.to_dict().items():
        blocks[f"cfg.{key}"] = np.array(float(value))
    for block, attr in _FLAG_BLOCKS.items():
        blocks[block] = np.array(1.0 if getattr(model, attr) else 0.0)
    bd.save_bundle(path, blocks)


def load_model(path) -> Model:
    _, blocks = bd.load_bundle(path)
    echo = {}
    params = {}
    for name, arr in blocks.items():
        if name.startswith("cfg."):
            echo[name] = float(arr)
        else:
            params[name] = arr
    missing = [b for b in _FLAG_BLOCKS if b not in echo]
    if missing:
        raise bd.BlockError(f"bundle lacks config blocks {missing}")
    cfg = RunConfig()
    for key, (attr, typ) in CONFIG_KEYS.items():
        block = f"cfg.{key}"
        if block in echo:
            setattr(cfg, attr, typ(echo[block]))
    want = expected_shapes(cfg.resolution)
    if set(params) != set(want):
        extra = sorted(set(params) - set(want))
        lacking = sorted(set(want) - set(params))
        raise bd.BlockError(f"block set mismatch: extra {extra}, missing {lacking}")
    for name, arr in params.items():
        if arr.shape != want[name]:
            raise bd.BlockError(f"block {name!r} has shape {arr.shape}, "
                                f"architecture needs {want[name]}")
    return Model(params=params, config=cfg,
                 use_enhance=echo["cfg.use_enhance"] != 0.0,
                 use_hffn=echo["cfg.use_hffn"] != 0.0,
                 use_multistage=echo["cfg.use_multistage"] != 0.0)


# ---------------------------------------------------------------------------
# input preparation

def prepare_input(model: Model, img: Image) -> Image:
    """Grayscale, resize to the working resolution, enhance (if enabled)."""
    res = model.config.resolution
    g = to_grayscale(img)
    if g.height != res or g.width != res:
        g = resize_bilinear(g, res, res)
    g = Image(np.clip(g.samples, en.OUT_EPS, 1.0))
    if model.use_enhance:
        g = en.enhance(model.params, g)
    return g


def _load_gray(path) -> Image:
    with open(path, "rb") as fh:
        return to_grayscale(dequantize(load_pnm(fh.read())))


def _batched_enhance(params, x, batch=32):
    graph = ad.ComputeGraph(lambda p, i: {"out": en.enhance_node(p, i["x"])},
                            params)
    out = np.empty_like(x)
    for s in range(0, len(x), batch):
        out[s:s + batch] = ad.evaluate(graph, {"x": x[s:s + batch]})["out"]
    return out


def _stage2_inputs(manifest_path, rows, model: Model):
    """Stacked (N,H,W,1) embedder inputs and (N,20) handcrafted vectors."""
    base = os.path.dirname(manifest_path)
    res = model.config.resolution

    def load(r):
        g = _load_gray(os.path.join(base, r["path_degraded"]))
        if g.samples.shape[:2] != (res, res):
            g = resize_bilinear(g, res, res)
        return np.clip(g.samples, en.OUT_EPS, 1.0)

    x = np.stack([load(r) for r in rows])
    if model.use_enhance:
        x = _batched_enhance(model.params, x)
    if model.use_hffn:
        hand = np.stack([handcrafted_vector(Image(x[i])) for i in range(len(x))])
    else:
        hand = np.zeros((len(x), HANDCRAFTED_DIM))
    return x, hand


# ---------------------------------------------------------------------------
# stage-2 joint graph

def _joint_nodes(p, i, use_hffn: bool):
    maps, vec = em.embed_nodes(p, i["x"])
    if use_hffn:
        n = i["hand"].data.shape[0]
        fused, attn = fu.fuse_nodes(p, vec, i["hand"], n)
    else:
        fused, attn = vec, None
    p_bin, probs, logits = cl.head_nodes(p, fused, i["mask"])
    return maps, fused, attn, p_bin, probs, logits


def joint_graph(params, use_hffn: bool = True) -> ad.ComputeGraph:
    def build(p, i):
        _, _, _, p_bin, probs, _ = _joint_nodes(p, i, use_hffn)
        total, bce, cce = cl.loss_nodes(p_bin, probs, i["y_bin"], i["y_onehot"])
        return {"loss": total, "bce": bce, "cce": cce, "probs": probs,
                "p_bin": p_bin}
    return ad.ComputeGraph(build, params)


def full_loss_graph(params, lam: float, use_hffn: bool = True) -> ad.ComputeGraph:
    """One graph from degraded pixels to the summed pipeline loss:
    reconstruction + lam*attenuation penalty + both cross-entropies."""
    def build(p, i):
        enh = en.enhance_node(p, i["low"])
        recon = ad.mean(ad.square(ad.sub(enh, i["clean"])))
        logratio = ad.sub(ad.log(enh), ad.log(i["low"]))
        resid = ad.sub(logratio, ad.mul(p["enh.mu_scale"], i["att"]))
        physics = ad.mean(ad.square(resid))
        maps, vec = em.embed_nodes(p, enh)
        if use_hffn:
            n = i["hand"].data.shape[0]
            fused, _ = fu.fuse_nodes(p, vec, i["hand"], n)
        else:
            fused = vec
        p_bin, probs, _ = cl.head_nodes(p, fused, i["mask"])
        joint, _, _ = cl.loss_nodes(p_bin, probs, i["y_bin"], i["y_onehot"])
        loss = ad.add(ad.add(recon, ad.mul(ad.Tensor(np.array(lam)), physics)),
                      joint)
        return {"loss": loss, "recon": recon, "physics": physics,
                "joint": joint}
    return ad.ComputeGraph(build, params)


_STAGE2_STREAM = 7  # seed lane for training dropout masks


MOMENTUM = 0.9
# preprocessing statistics, present in the stage-2 graph but never updated
_FROZEN = ("fus.hand_mu", "fus.hand_scale")


def train_stage2(x, hand, grades, model: Model, progress=None):
    """Joint SGD (with momentum) over embedder + fusion + heads on cached
    stage-2 inputs."""
    cfg = model.config
    n = len(x)
    y_bin = (grades > 0).astype(np.float64)[:, None]
    y_onehot = np.zeros((n, cl.N_CLASSES))
    y_onehot[np.arange(n), grades] = 1.0

    trained = {k: v for k, v in model.params.items()
               if k.startswith(("emb.", "cls."))
               or (model.use_hffn and k.startswith("fus."))}
    graph = joint_graph(trained, model.use_hffn)
    velocity = {k: np.zeros_like(v) for k, v in trained.items()}
    history = {"train_total": [], "train_bce": [], "train_cce": []}
    for epoch in range(cfg.classifier_epochs):
        # settle: halve the step twice in the last third
        lr = cfg.classifier_lr
        if 3 * epoch >= 2 * cfg.classifier_epochs:
            lr *= 0.5
        if 6 * epoch >= 5 * cfg.classifier_epochs:
            lr *= 0.5
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 3, epoch])).permutation(n)
        mask_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _STAGE2_STREAM, epoch]))
        tot = tb = tc = 0.0
        for s in range(0, n, cfg.classifier_batch):
            idx = order[s:s + cfg.classifier_batch]
            inputs = {"x": x[idx], "hand": hand[idx],
                      "mask": cl.sample_mask(mask_rng, cfg.dropout_p, len(idx)),
                      "y_bin": y_bin[idx], "y_onehot": y_onehot[idx]}
            vals = ad.evaluate(graph, inputs)
            grads, _ = ad.gradients(graph, inputs)
            for name, g in grads.items():
                if name in _FROZEN:
                    continue
                velocity[name] = MOMENTUM * velocity[name] + g
                graph.parameters[name] -= lr * velocity[name]
            tot += float(vals["loss"]) * len(idx)
            tb += float(vals["bce"]) * len(idx)
            tc += float(vals["cce"]) * len(idx)
        history["train_total"].append(tot / n)
        history["train_bce"].append(tb / n)
        history["train_cce"].append(tc / n)
        if progress:
            progress(f"stage 2 epoch {epoch + 1}/{cfg.classifier_epochs} "
                     f"loss {tot / n:.4f}")
    model.params.update(graph.parameters)
    return history


def train_full(manifest_path, config: RunConfig = None, use_enhance=True,
               use_hffn=True, use_multistage=True, progress=None):
    """Two-stage training from a manifest. Returns (Model, history dict)."""
    cfg = config or RunConfig()
    rows = [r for r in read_manifest(manifest_path) if r["split"] == "train"]
    if not rows:
        raise ValueError("empty train split")
    model = init_model(cfg, use_enhance, use_hffn, use_multistage)
    history = {}
    if use_enhance:
        ecfg = en.EnhanceConfig(lam=cfg.lam, learning_rate=cfg.enhance_lr,
                                epochs=cfg.enhance_epochs,
                                batch_size=cfg.enhance_batch,
                                seed=cfg.seed, max_pairs=cfg.enhance_pairs,
                                resolution=cfg.resolution)
        enh_params, enh_hist = en.train_enhancer(manifest_path, ecfg)
        model.params.update(enh_params)
        history["enhance"] = enh_hist
        if progress:
            progress(f"stage 1 done, final recon "
                     f"{enh_hist['train_recon'][-1]:.6f}")
    grades = np.array([int(r["grade"]) for r in rows])
    x, hand = _stage2_inputs(manifest_path, rows, model)
    if model.use_hffn:
        model.params.update(fu.fit_hand_stats(hand))
    if progress:
        progress(f"stage 2 inputs cached: {len(x)} samples")
    history["classifier"] = train_stage2(x, hand, grades, model, progress)
    return model, history


# ---------------------------------------------------------------------------
# prediction

def fused_vector(model: Model, prepared: Image):
    """(fused 64-vector, handcrafted vector or None) for a prepared image."""
    deep = em.embed(model.params, prepared, model.config.resolution)
    if not model.use_hffn:
        return deep.vector, None
    hand = handcrafted_vector(prepared)
    fused, _ = fu.fuse(model.params, deep.vector, hand)
    return fused, hand


def predict(model: Model, img: Image, seed: int = 0, T: int = None) -> cl.Prediction:
    cfg = model.config
    prepared = prepare_input(model, img)
    fused, _ = fused_vector(model, prepared)
    stats = cl.mc_predict(model.params, fused, T or cfg.mc_samples, seed,
                          cfg.dropout_p)
    pred = cl.final_prediction(stats, cfg.tau)
    if not model.use_multistage:
        severity = int(np.argmax(pred.confidence_scores))
        pred = dataclasses.replace(pred, severity=severity)
    return pred


# ---------------------------------------------------------------------------
# evaluation

def evaluate_predictions(grades, predictions) -> dict:
    truth = np.asarray(grades)
    sev = np.array([p.severity for p in predictions])
    scores = np.stack([p.confidence_scores for p in predictions])
    cm = mx.confusion(truth, sev)
    report = {"n": int(len(truth))}
    report.update(mx.scalar_metrics(cm))
    report["binary_accuracy"] = float(np.mean((sev > 0) == (truth > 0)))
    report["auc"] = mx.auc_ovr(truth, scores)
    report["map"] = mx.mean_average_precision(truth, scores)
    report["confusion"] = cm.tolist()
    return report


def evaluate(model: Model, manifest_path, split: str = "test",
             time_samples: int = 5, progress=None) -> dict:
    rows = [r for r in read_manifest(manifest_path) if r["split"] == split]
    if not rows:
        raise ValueError(f"empty split {split!r}")
    base = os.path.dirname(manifest_path)
    images = [_load_gray(os.path.join(base, r["path_degraded"])) for r in rows]
    grades = [int(r["grade"]) for r in rows]
    preds = []
    for idx, img in enumerate(images):
        preds.append(predict(model, img, seed=model.config.seed + idx))
        if progress and (idx + 1) % 100 == 0:
            progress(f"evaluated {idx + 1}/{len(images)}")
    report = evaluate_predictions(grades, preds)
    report["split"] = split
    if time_samples > 0:
        subset = images[:min(time_samples, len(images))]
        report["mean_inference_ms"] = mx.time_inference(
            lambda im: predict(model, im, seed=0), subset, repeats=1)
    return report


def ablation_sweep(model: Model, manifest_path, split: str = "test",
                   progress=None):
    """The four variants on shared weights. Returns [(name, report), ...]."""
    out = []
    for name in VARIANTS:
        if progress:
            progress(f"variant {name}")
        out.append((name, evaluate(model.variant(name), manifest_path, split,
                                   time_samples=0, progress=progress)))
    return out
