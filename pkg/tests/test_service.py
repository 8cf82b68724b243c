import base64

import pytest
from fastapi.testclient import TestClient

from drgrade import pipeline as pl
from drgrade import synth
from drgrade.config import RunConfig
from drgrade.service.app import create_app


@pytest.fixture(scope="module")
def stack(tmp_path_factory):
    d = tmp_path_factory.mktemp("svc")
    manifest = synth.generate_dataset(24, 5, [0.2] * 5, str(d / "ds"), size=64)
    cfg = RunConfig(resolution=64, enhance_epochs=1, enhance_pairs=6,
                    classifier_epochs=1, classifier_batch=8,
                    mc_samples=3, seed=1)
    model, _ = pl.train_full(manifest, cfg)
    bundle = d / "m.drnb"
    pl.save_model(model, bundle)
    rows = synth.read_manifest(manifest)
    image = d / "ds" / [r for r in rows if r["split"] == "test"][0]["path_degraded"]
    return {"dir": d, "manifest": manifest, "bundle": str(bundle),
            "image_b64": base64.b64encode(image.read_bytes()).decode()}


@pytest.fixture()
def client(stack):
    return TestClient(create_app())


@pytest.fixture()
def loaded(stack):
    c = TestClient(create_app(model_path=stack["bundle"]))
    return c


def test_health_reports_load_state(client, loaded):
    assert client.get("/health").json() == {"status": "ok", "loaded": False}
    assert loaded.get("/health").json() == {"status": "ok", "loaded": True}


def test_endpoints_require_model(client, stack):
    assert client.get("/model/info").status_code == 409
    assert client.post("/predict",
                       json={"image_b64": stack["image_b64"]}).status_code == 409
    assert client.post("/eval",
                       json={"manifest": stack["manifest"]}).status_code == 409


def test_model_load_and_info(client, stack):
    r = client.post("/model/load", json={"path": stack["bundle"]})
    assert r.status_code == 200
    info = r.json()
    assert info["variant"] == "full"
    assert info["config"]["resolution"] == 64
    assert client.get("/model/info").json() == info


def test_model_load_errors(client, stack, tmp_path):
    assert client.post("/model/load",
                       json={"path": str(tmp_path / "no.drnb")}).status_code == 404
    bad = tmp_path / "bad.drnb"
    data = bytearray(open(stack["bundle"], "rb").read())
    data[len(data) // 2] ^= 0xFF
    bad.write_bytes(bytes(data))
    r = client.post("/model/load", json={"path": str(bad)})
    assert r.status_code == 400 and "bundle" in r.json()["detail"]


def test_predict_contract_and_determinism(loaded, stack):
    req = {"image_b64": stack["image_b64"], "seed": 3}
    a = loaded.post("/predict", json=req)
    assert a.status_code == 200
    payload = a.json()["prediction"]
    assert set(payload) == {"severity", "confidence_scores", "uncertainty",
                            "binary_mean", "binary_variance", "T", "seed"}
    assert payload["seed"] == 3 and payload["T"] == 3
    assert abs(sum(payload["confidence_scores"]) - 1.0) <= 1e-6
    b = loaded.post("/predict", json=req)
    assert b.json() == a.json()


def test_predict_explain_returns_maps(loaded, stack):
    r = loaded.post("/predict", json={"image_b64": stack["image_b64"],
                                      "explain": True})
    assert r.status_code == 200
    body = r.json()
    cam = base64.b64decode(body["cam_pgm_b64"])
    heat = base64.b64decode(body["uncertainty_pgm_b64"])
    assert cam.startswith(b"P5") and heat.startswith(b"P5")


def test_predict_input_errors(loaded):
    assert loaded.post("/predict",
                       json={"image_b64": "!!!"}).status_code == 400
    junk = base64.b64encode(b"P5 nonsense").decode()
    assert loaded.post("/predict",
                       json={"image_b64": junk}).status_code == 400
    assert loaded.post("/predict", json={}).status_code == 422


def test_synth_endpoint(client, tmp_path):
    r = client.post("/synth", json={"n": 6, "seed": 2,
                                    "out_dir": str(tmp_path / "ds"),
                                    "size": 64, "dist": [1, 0, 0, 0, 0]})
    assert r.status_code == 200
    body = r.json()
    assert body["by_grade"]["0"] == 6
    assert sum(body["by_split"].values()) == 6
    assert synth.read_manifest(body["manifest"])
    bad = client.post("/synth", json={"n": 2, "seed": 0,
                                      "out_dir": str(tmp_path / "x"),
                                      "dist": [1, 1, 0, 0, 0]})
    assert bad.status_code == 400


def test_train_endpoint_loads_result(client, stack, tmp_path):
    out = tmp_path / "trained.drnb"
    r = client.post("/train", json={
        "manifest": stack["manifest"], "out": str(out),
        "overrides": {"resolution": 64, "enhance_epochs": 1,
                      "enhance_pairs": 4, "classifier_epochs": 1,
                      "classifier_batch": 8, "mc_samples": 3, "seed": 2},
        "no_hffn": True})
    assert r.status_code == 200
    body = r.json()
    assert body["variant"] == "no_hffn"
    assert "classifier" in body["history"]
    assert out.exists()
    assert client.get("/model/info").json()["variant"] == "no_hffn"


def test_eval_endpoint(loaded, stack):
    r = loaded.post("/eval", json={"manifest": stack["manifest"],
                                   "split": "test"})
    assert r.status_code == 200
    reports = r.json()["reports"]
    assert set(reports) == {"full"}
    assert 0.0 <= reports["full"]["accuracy"] <= 1.0
    sweep = loaded.post("/eval", json={"manifest": stack["manifest"],
                                       "split": "test",
                                       "ablation_sweep": True})
    assert set(sweep.json()["reports"]) == {"full", "no_enhance", "no_hffn",
                                            "no_multistage"}
    empty = loaded.post("/eval", json={"manifest": stack["manifest"],
                                       "split": "nope"})
    assert empty.status_code == 400
