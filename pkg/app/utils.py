# app/utils.py - Shared errors, logging, seeding and rotation helpers
import math
import random
import logging
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from app.config import settings

# Setup logging
logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


# ================================
# SHARED ERRORS
# ================================

class AvatarError(Exception):
    """Base error; exit_code is what the CLI returns"""
    exit_code = 2


class ContractViolation(AvatarError):
    exit_code = 1


class ConfigError(AvatarError):
    exit_code = 1


class DatasetError(AvatarError):
    exit_code = 1

    def __init__(self, message: str, frame: Optional[int] = None):
        self.frame = frame
        if frame is not None:
            message = f"frame {frame}: {message}"
        super().__init__(message)


class CheckpointError(AvatarError):
    exit_code = 1


class DegenerateFacetError(AvatarError):
    exit_code = 1

    def __init__(self, facet: int, area: float):
        self.facet = facet
        self.area = area
        super().__init__(f"Degenerate facet {facet} (area {area:.3e})")


class DegenerateCovarianceError(AvatarError):
    exit_code = 1


class TrainingDivergedError(AvatarError):
    exit_code = 2


# ================================
# RUNTIME SETUP
# ================================

def configure_logging(level: Optional[str] = None):
    """Configure root logging once for the process"""
    logging.basicConfig(level=(level or settings.log_level).upper(), format=LOG_FORMAT)


def configure_torch():
    """Apply thread count and determinism from settings"""
    torch.set_num_threads(max(1, settings.num_threads))
    if settings.deterministic:
        torch.use_deterministic_algorithms(True)
    settings.is_reference_mode()


def get_dtype() -> torch.dtype:
    return torch.float64 if settings.dtype == "float64" else torch.float32


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; returns a dedicated torch generator"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    return make_generator(seed)


def make_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def frame_seed(seed: int, frame: int) -> int:
    """Frame-keyed seed for per-frame resampling"""
    return (seed * 1_000_003 + frame * 7919) % (2 ** 31 - 1)


def inverse_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x / (1 - x))


def get_expon_lr_func(lr_init: float, lr_final: float, lr_delay_steps: int = 0,
                      lr_delay_mult: float = 1.0, max_steps: int = 1_000_000) -> Callable[[int], float]:
    """Exponential decay from lr_init to lr_final, with optional sine warm-up delay"""

    def helper(step: int) -> float:
        if step < 0 or (lr_init == 0.0 and lr_final == 0.0):
            return 0.0
        if lr_delay_steps > 0:
            delay_rate = lr_delay_mult + (1 - lr_delay_mult) * math.sin(
                0.5 * math.pi * min(max(step / lr_delay_steps, 0.0), 1.0)
            )
        else:
            delay_rate = 1.0
        t = min(max(step / max(max_steps, 1), 0.0), 1.0)
        log_lerp = math.exp(math.log(lr_init) * (1 - t) + math.log(lr_final) * t)
        return delay_rate * log_lerp

    return helper


# ================================
# QUATERNION UTILITIES (w, x, y, z)
# ================================

def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return F.normalize(q, dim=-1)


def quat_conjugate(q: torch.Tensor) -> torch.Tensor:
    return q * q.new_tensor([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a ⊗ b"""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrix of a unit quaternion; (..., 4) -> (..., 3, 3)"""
    w, x, y, z = q.unbind(-1)
    R = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1)
    return R.reshape(*q.shape[:-1], 3, 3)


def rotmat_to_quat(R: torch.Tensor) -> torch.Tensor:
    """Unit quaternion (w >= 0) of a rotation matrix, branching on the largest diagonal term"""
    m00, m01, m02 = R[..., 0, 0], R[..., 0, 1], R[..., 0, 2]
    m10, m11, m12 = R[..., 1, 0], R[..., 1, 1], R[..., 1, 2]
    m20, m21, m22 = R[..., 2, 0], R[..., 2, 1], R[..., 2, 2]
    trace = m00 + m11 + m22

    def safe_sqrt(x):
        return torch.sqrt(torch.clamp(x, min=1e-12))

    s0 = safe_sqrt(1.0 + trace) * 2
    q0 = torch.stack([0.25 * s0, (m21 - m12) / s0, (m02 - m20) / s0, (m10 - m01) / s0], dim=-1)
    s1 = safe_sqrt(1.0 + m00 - m11 - m22) * 2
    q1 = torch.stack([(m21 - m12) / s1, 0.25 * s1, (m01 + m10) / s1, (m02 + m20) / s1], dim=-1)
    s2 = safe_sqrt(1.0 + m11 - m00 - m22) * 2
    q2 = torch.stack([(m02 - m20) / s2, (m01 + m10) / s2, 0.25 * s2, (m12 + m21) / s2], dim=-1)
    s3 = safe_sqrt(1.0 + m22 - m00 - m11) * 2
    q3 = torch.stack([(m10 - m01) / s3, (m02 + m20) / s3, (m12 + m21) / s3, 0.25 * s3], dim=-1)

    candidates = torch.stack([q0, q1, q2, q3], dim=-2)
    choice = torch.stack([trace, m00, m11, m22], dim=-1).argmax(dim=-1)
    q = torch.gather(candidates, -2, choice[..., None, None].expand(*choice.shape, 1, 4)).squeeze(-2)
    q = torch.where(q[..., :1] < 0, -q, q)
    return quat_normalize(q)


def axis_angle_to_quat(axis_angle: torch.Tensor) -> torch.Tensor:
    angle = axis_angle.norm(dim=-1, keepdim=True)
    half = 0.5 * angle
    # sin(half)/angle with its limit 0.5 at zero
    scale = torch.where(angle > 1e-12, torch.sin(half) / angle.clamp(min=1e-12), 0.5 - angle ** 2 / 48)
    return torch.cat([torch.cos(half), axis_angle * scale], dim=-1)


def rotation_about_axis(axis: str, angle: float, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """3x3 rotation about a coordinate axis"""
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        m = [[1, 0, 0], [0, c, -s], [0, s, c]]
    elif axis == "y":
        m = [[c, 0, s], [0, 1, 0], [-s, 0, c]]
    elif axis == "z":
        m = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
    else:
        raise ValueError(f"Unknown axis: {axis}")
    return torch.tensor(m, dtype=dtype)


def random_rotation(generator: Optional[torch.Generator] = None, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Uniform random rotation matrix"""
    q = torch.randn(4, generator=generator, dtype=dtype)
    return quat_to_rotmat(quat_normalize(q))
