"""FastAPI app over the core pipeline.

One bundle is held in memory at a time; /model/load swaps it. Error
mapping: missing files 404, domain/bundle/validation problems 400,
operations needing a model while none is loaded 409.
"""

import base64
import binascii

from fastapi import FastAPI, HTTPException

from .. import bundle as bd
from .. import explain as ex
from .. import pipeline as pl
from .. import synth
from ..cli import variant_name
from ..config import ConfigError, RunConfig, apply_overrides, load_config
from ..imaging import Image, dequantize, encode_pnm, load_pnm
from . import schemas as sc


def _http(err: Exception) -> HTTPException:
    if isinstance(err, FileNotFoundError):
        return HTTPException(404, str(err))
    if isinstance(err, bd.BundleError):
        return HTTPException(400, f"bundle error: {err}")
    if isinstance(err, (ConfigError, ValueError)):
        return HTTPException(400, str(err))
    if isinstance(err, OSError):
        return HTTPException(500, str(err))
    raise err


def _info(path: str, model: pl.Model) -> sc.BundleInfo:
    return sc.BundleInfo(path=path, variant=variant_name(model),
                         use_enhance=model.use_enhance,
                         use_hffn=model.use_hffn,
                         use_multistage=model.use_multistage,
                         config=model.config.to_dict())


def _map_b64(m) -> str:
    return base64.b64encode(encode_pnm(Image(m[..., None]))).decode("ascii")


def create_app(model_path=None) -> FastAPI:
    app = FastAPI(title="drgrade", description=__doc__)
    app.state.model = None
    app.state.model_path = None

    def load(path):
        try:
            app.state.model = pl.load_model(path)
        except Exception as err:
            raise _http(err)
        app.state.model_path = str(path)

    if model_path:
        load(model_path)

    def require_model() -> pl.Model:
        if app.state.model is None:
            raise HTTPException(409, "no model loaded; POST /model/load first")
        return app.state.model

    @app.get("/health", response_model=sc.HealthResponse)
    def health():
        return sc.HealthResponse(status="ok", loaded=app.state.model is not None)

    @app.post("/model/load", response_model=sc.BundleInfo)
    def model_load(req: sc.LoadRequest):
        load(req.path)
        return _info(app.state.model_path, app.state.model)

    @app.get("/model/info", response_model=sc.BundleInfo)
    def model_info():
        return _info(app.state.model_path, require_model())

    @app.post("/predict", response_model=sc.PredictResponse)
    def predict(req: sc.PredictRequest):
        model = require_model()
        try:
            data = base64.b64decode(req.image_b64, validate=True)
        except binascii.Error as err:
            raise HTTPException(400, f"image_b64: {err}")
        try:
            img = dequantize(load_pnm(data))
            seed = model.config.seed if req.seed is None else req.seed
            pred = pl.predict(model, img, seed=seed, T=req.mc_samples)
            out = sc.PredictResponse(
                prediction=sc.PredictionPayload(**pred.to_dict()))
            if req.explain:
                cfg = model.config
                prepared = pl.prepare_input(model, img)
                cam = ex.grad_cam(model.params, prepared, pred.severity)
                heat = ex.uncertainty_heatmap(model.params, prepared,
                                              T=max(pred.T, 2), seed=seed,
                                              p=cfg.dropout_p, tau=cfg.tau)
                out.cam_pgm_b64 = _map_b64(cam)
                out.uncertainty_pgm_b64 = _map_b64(heat)
            return out
        except Exception as err:
            raise _http(err)

    @app.post("/synth", response_model=sc.SynthResponse)
    def synth_dataset(req: sc.SynthRequest):
        try:
            manifest = synth.generate_dataset(req.n, req.seed, req.dist,
                                              req.out_dir, size=req.size)
            rows = synth.read_manifest(manifest)
        except Exception as err:
            raise _http(err)
        by_grade = {g: 0 for g in range(5)}
        by_split = {"train": 0, "val": 0, "test": 0}
        for r in rows:
            by_grade[int(r["grade"])] += 1
            by_split[r["split"]] += 1
        return sc.SynthResponse(manifest=manifest, by_grade=by_grade,
                                by_split=by_split)

    @app.post("/train", response_model=sc.TrainResponse)
    def train(req: sc.TrainRequest):
        try:
            cfg = load_config(req.config_path) if req.config_path else RunConfig()
            if req.overrides:
                cfg = apply_overrides(cfg, req.overrides)
            model, history = pl.train_full(
                req.manifest, cfg, use_enhance=not req.no_enhance,
                use_hffn=not req.no_hffn, use_multistage=not req.no_multistage)
            pl.save_model(model, req.out)
        except Exception as err:
            raise _http(err)
        if req.load_when_done:
            app.state.model = model
            app.state.model_path = str(req.out)
        return sc.TrainResponse(bundle=str(req.out),
                                variant=variant_name(model), history=history)

    @app.post("/eval", response_model=sc.EvalResponse)
    def evaluate(req: sc.EvalRequest):
        model = require_model()
        try:
            if req.ablation_sweep:
                reports = dict(pl.ablation_sweep(model, req.manifest, req.split))
            else:
                reports = {variant_name(model):
                           pl.evaluate(model, req.manifest, req.split)}
        except Exception as err:
            raise _http(err)
        return sc.EvalResponse(reports=reports)

    return app
