from pydantic_settings import BaseSettings
from pydantic import BaseModel, Field, field_validator, model_validator
from dotenv import load_dotenv
from pathlib import Path
from typing import Optional
import json
import logging

load_dotenv()
logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    # Runtime
    log_level: str = "INFO"
    device: str = "cpu"
    dtype: str = "float32"

    # Reproducibility (num_threads=1 is the bit-exact reference mode)
    num_threads: int = 1
    deterministic: bool = True
    seed: int = 0

    # Rendering
    tile_size: int = 16

    # Output
    output_dir: str = "./runs"

    model_config = {
        "env_file": ".env",
        "env_prefix": "GSAV_",
        "case_sensitive": False,
        "extra": "ignore"  # Ignore extra fields
    }

    def is_reference_mode(self) -> bool:
        """Check if the single-threaded deterministic mode is active"""
        is_reference = self.deterministic and self.num_threads == 1

        if is_reference:
            logger.info("✅ Reference mode: single thread, deterministic kernels")
        else:
            logger.warning("⚠️ Parallel mode - results match reference only to 1e-6 per pixel")
            logger.warning(f"DETERMINISTIC: {'✅' if self.deterministic else '❌'}")
            logger.warning(f"NUM_THREADS: {self.num_threads}")

        return is_reference


settings = Settings()


# ================================
# EXPERIMENT CONFIGURATION
# ================================

class LossWeights(BaseModel):
    lam: float = Field(0.2, ge=0.0, le=1.0)  # D-SSIM mix
    a: float = Field(1.0, ge=0.0)  # scale regularizer
    b: float = Field(0.01, ge=0.0)  # position regularizer
    c: float = Field(0.1, ge=0.0)  # patch loss
    eps_s: float = Field(0.4, ge=0.0)
    eps_mu: float = Field(0.2, ge=0.0)


class GaussianLearningRates(BaseModel):
    position_init: float = Field(5e-3, gt=0.0)
    position_final: float = Field(5e-5, gt=0.0)
    position_delay_mult: float = Field(0.01, gt=0.0)
    scaling: float = Field(1.7e-2, gt=0.0)
    rotation: float = Field(1e-3, gt=0.0)
    opacity: float = Field(5e-2, gt=0.0)
    color: float = Field(2.5e-3, gt=0.0)


class DensifyConfig(BaseModel):
    interval: int = Field(100, gt=0)
    start_step: int = Field(100, ge=0)
    stop_fraction: float = Field(0.75, gt=0.0, le=1.0)  # of stage-1 steps
    grad_threshold: float = Field(2e-4, gt=0.0)
    min_opacity: float = Field(5e-3, ge=0.0, le=1.0)
    dense_scale_limit: float = Field(0.5, gt=0.0)  # local units; above it split, below it clone
    max_gaussians: int = Field(200_000, gt=0)


class NetworkConfig(BaseModel):
    hidden: int = Field(256, gt=0)
    hand_depth: int = Field(4, ge=2)
    interaction_depth: int = Field(6, ge=2)
    point_feature_dim: int = Field(64, gt=0)
    geo_feature_dim: int = Field(1024, gt=0)
    n_freq: int = Field(6, ge=0)
    n_freq_deform: int = Field(4, ge=0)


class TrainConfig(BaseModel):
    stage1_steps: int = Field(2000, ge=0)
    stage2_steps: int = Field(2000, ge=0)
    n_per_face: int = Field(20, ge=1)

    gaussian_lr: GaussianLearningRates = GaussianLearningRates()
    mlp_lr: float = Field(1e-3, gt=0.0)
    point_feature_lr: float = Field(2.5e-3, gt=0.0)
    loss: LossWeights = LossWeights()
    densify: DensifyConfig = DensifyConfig()
    network: NetworkConfig = NetworkConfig()

    oversampling: float = Field(4.0, ge=1.0)
    holdout_view: Optional[int] = 7
    seed: int = 0
    checkpoint_every: int = Field(0, ge=0)  # 0 = only at stage end

    # Interaction
    pbd_iters: int = Field(10, ge=1)
    d_max: float = Field(0.05, gt=0.0)
    tau_def: float = Field(1e-4, ge=0.0)

    # Ablations
    use_hand_mlp: bool = True
    use_interaction_mlp: bool = True
    use_pbd: bool = True
    use_patch_loss: bool = True

    @field_validator("stage1_steps", "stage2_steps")
    @classmethod
    def check_steps(cls, value: int) -> int:
        if value > 10_000_000:
            raise ValueError("step count too large")
        return value

    @model_validator(mode="after")
    def check_network(self) -> "TrainConfig":
        if self.network.hand_depth > self.network.interaction_depth:
            logger.warning("⚠️ Hand networks deeper than the interaction network")
        return self

    @classmethod
    def preset(cls, name: str) -> "TrainConfig":
        """Named configuration presets"""
        if name == "desk":
            return cls(n_per_face=4, network=NetworkConfig(hidden=64, geo_feature_dim=1024))
        if name == "full":
            return cls(
                stage1_steps=100_000,
                stage2_steps=100_000,
                n_per_face=20,
                gaussian_lr=GaussianLearningRates(),
                densify=DensifyConfig(interval=100, start_step=500, stop_fraction=0.5),
                network=NetworkConfig(hidden=256),
            )
        raise ValueError(f"Unknown preset: {name}")

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        """Load config from a JSON file; a 'preset' key selects the base values"""
        data = json.loads(Path(path).read_text())
        preset = data.pop("preset", None)
        if preset:
            base = cls.preset(preset).model_dump()
            base.update(data)
            data = base
        return cls.model_validate(data)

    def to_file(self, path: str | Path):
        Path(path).write_text(self.model_dump_json(indent=2))
