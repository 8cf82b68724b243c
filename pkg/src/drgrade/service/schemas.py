"""Request/response models for the HTTP service.

PredictionPayload mirrors the CLI's prediction JSON key for key; images and
heatmaps travel as base64-encoded PGM/PPM bytes.
"""

from typing import Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    loaded: bool


class BundleInfo(BaseModel):
    path: str
    variant: str
    use_enhance: bool
    use_hffn: bool
    use_multistage: bool
    config: dict


class LoadRequest(BaseModel):
    path: str


class PredictRequest(BaseModel):
    image_b64: str
    seed: Optional[int] = None  # default: the bundle's seed
    mc_samples: Optional[int] = Field(default=None, ge=1)
    explain: bool = False


class PredictionPayload(BaseModel):
    severity: int = Field(ge=0, le=4)
    confidence_scores: list[float] = Field(min_length=5, max_length=5)
    uncertainty: list[float] = Field(min_length=5, max_length=5)
    binary_mean: float
    binary_variance: float
    T: int
    seed: int


class PredictResponse(BaseModel):
    prediction: PredictionPayload
    cam_pgm_b64: Optional[str] = None
    uncertainty_pgm_b64: Optional[str] = None


class SynthRequest(BaseModel):
    n: int = Field(gt=0)
    seed: int = Field(ge=0)
    out_dir: str
    dist: list[float] = Field(default=[0.2] * 5, min_length=5, max_length=5)
    size: int = Field(default=128, ge=64)


class SynthResponse(BaseModel):
    manifest: str
    by_grade: dict[int, int]
    by_split: dict[str, int]


class TrainRequest(BaseModel):
    manifest: str
    out: str
    config_path: Optional[str] = None
    overrides: dict = Field(default_factory=dict)  # config keys -> values
    no_enhance: bool = False
    no_hffn: bool = False
    no_multistage: bool = False
    load_when_done: bool = True


class TrainResponse(BaseModel):
    bundle: str
    variant: str
    history: dict


class EvalRequest(BaseModel):
    manifest: str
    split: str = "test"
    ablation_sweep: bool = False


class EvalResponse(BaseModel):
    reports: dict[str, dict]  # variant name -> metrics report
