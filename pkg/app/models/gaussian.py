"""
3D Gaussian primitives and the scene map
"""
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

PARAM_BLOCKS = ("means", "quats", "log_scales", "opacity_logits", "colors")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianPrimitive:
    """A single primitive; quaternion is scalar-first (w, x, y, z)"""

    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    id: int = -1

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rot, dtype=np.float64).reshape(4)
        self.rot = rot / np.linalg.norm(rot)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError("Gaussian scales must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError("Gaussian opacity must lie in (0, 1)")


@dataclass
class GaussianMap:
    """Struct-of-arrays Gaussian map.

    Scales are stored as logs and opacities as logits so unconstrained updates keep
    every primitive valid. ``version`` increases on every mutation.
    """

    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    means: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quats: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    log_scales: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    opacity_logits: np.ndarray = field(default_factory=lambda: np.zeros(0))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    obs_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    created_kf: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    next_id: int = 0
    version: int = 0

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mu=self.means[index].copy(),
            rot=self.quats[index].copy(),
            scale=self.scales[index].copy(),
            opacity=float(self.opacities[index]),
            color=self.colors[index].copy(),
            id=int(self.ids[index]),
        )

    def append(self, means, quats, log_scales, opacity_logits, colors, keyframe: int = 0) -> np.ndarray:
        """Append primitives and return their new ids"""
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = means.shape[0]
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.ids = np.concatenate([self.ids, new_ids])
        self.means = np.concatenate([self.means, means])
        self.quats = np.concatenate([self.quats, np.asarray(quats, dtype=np.float64).reshape(-1, 4)])
        self.log_scales = np.concatenate([self.log_scales, np.asarray(log_scales, dtype=np.float64).reshape(-1, 3)])
        self.opacity_logits = np.concatenate([self.opacity_logits, np.asarray(opacity_logits, dtype=np.float64).reshape(-1)])
        self.colors = np.concatenate([self.colors, np.asarray(colors, dtype=np.float64).reshape(-1, 3)])
        self.obs_counts = np.concatenate([self.obs_counts, np.zeros(n, dtype=np.int64)])
        self.created_kf = np.concatenate([self.created_kf, np.full(n, keyframe, dtype=np.int64)])
        self.next_id += n
        self.touch()
        return new_ids

    def add_primitive(self, g: GaussianPrimitive, keyframe: int = 0) -> int:
        new_ids = self.append(g.mu, g.rot, np.log(g.scale), logit(g.opacity), g.color, keyframe)
        return int(new_ids[0])

    def keep(self, mask: np.ndarray) -> None:
        """Drop every primitive where mask is False"""
        mask = np.asarray(mask, dtype=bool)
        for name in ("ids", "means", "quats", "log_scales", "opacity_logits",
                     "colors", "obs_counts", "created_kf"):
            setattr(self, name, getattr(self, name)[mask])
        self.touch()

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_BLOCKS}

    def set_params(self, **blocks: np.ndarray) -> None:
        for name, value in blocks.items():
            if name not in PARAM_BLOCKS:
                raise KeyError(name)
            setattr(self, name, np.asarray(value, dtype=np.float64))
        self.touch()

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "GaussianMap":
        return GaussianMap(
            ids=self.ids.copy(), means=self.means.copy(), quats=self.quats.copy(),
            log_scales=self.log_scales.copy(), opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(), obs_counts=self.obs_counts.copy(),
            created_kf=self.created_kf.copy(), next_id=self.next_id, version=self.version,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params().values())

    @classmethod
    def from_primitives(cls, primitives, keyframe: int = 0) -> "GaussianMap":
        gmap = cls()
        for g in primitives:
            gmap.add_primitive(g, keyframe)
        return gmap

