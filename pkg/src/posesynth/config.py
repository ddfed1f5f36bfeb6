"""Sectioned INI run configuration with strict keys and stable hashes.

Every artifact records the hash of the sections it depends on, so a later
command can refuse to resume from or build on something produced under a
different configuration.
"""

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass, field, fields, replace

from posesynth._validation import InvalidArgumentError


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"


@dataclass
class DataSection:
    n_train: int = 2
    n_test: int = 1
    resolution: int = 64
    n_views: int = 4
    n_frames: int = 6
    target_frames: int = 5
    n_joints: int = 8
    tex_size: int = 64
    pose_scale: float = 0.25
    shape_scale: float = 0.8


@dataclass
class NerfSection:
    iterations: int = 2000
    lr: float = 2e-3
    lr_final: float = 1e-4
    warmup: int = 50
    samples_train: int = 64
    samples_eval: int = 128
    feature_channels: int = 32
    grid_size: int = 16
    voxel_channels: int = 16
    hidden: int = 128
    depth: int = 4
    radius: float = 0.05
    lambda_mask: float = 0.1
    lambda_ssim: float = 0.1
    lambda_lpips: float = 0.1
    perceptual: bool = True
    checkpoint_every: int = 250


@dataclass
class RefinerSection:
    base_channels: int = 64
    sparse_stride: int = 2
    cond_strategy: str = "conv_add"
    camera_inputs: str = "rotation_translation"
    mlgf_inputs: str = "full"
    use_nerf_coarse: bool = True
    use_normal_branch: bool = True
    normal_source: str = "mesh"
    codec: str = "residual"
    T: int = 1000
    lr: float = 3e-4
    phase1_steps: int = 500
    phase2_steps: int = 100
    sample_steps: int = 50
    reference_dropout: float = 0.1
    guidance_scale: float = 1.0
    checkpoint_every: int = 100


@dataclass
class EvalSection:
    protocol: str = "all"
    split: str = "test"
    masked: bool = False


CHOICES = {
    ("refiner", "cond_strategy"): ("conv_add", "concat"),
    ("refiner", "camera_inputs"): ("rotation_only", "rotation_translation"),
    ("refiner", "mlgf_inputs"): ("full", "no_texture", "no_normal_semantic"),
    ("refiner", "normal_source"): ("mesh", "depth"),
    ("refiner", "codec"): ("linear", "residual"),
    ("eval", "protocol"): ("all", "novel_view", "novel_pose"),
    ("eval", "split"): ("train", "test"),
}

# sections each stage's artifacts depend on
STAGE_SECTIONS = {
    "data": ("run.seed", "data"),
    "nerf": ("run.seed", "data", "nerf"),
    "refiner": ("run.seed", "data", "nerf", "refiner"),
}

# run-length and inference-time keys: extending a run or sampling differently
# does not invalidate what was trained so far
UNHASHED = {
    "nerf.iterations", "nerf.checkpoint_every", "nerf.samples_eval",
    "refiner.phase1_steps", "refiner.phase2_steps", "refiner.checkpoint_every",
    "refiner.sample_steps", "refiner.guidance_scale",
}


def _parse(value, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return type(default)(value.strip())


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    nerf: NerfSection = field(default_factory=NerfSection)
    refiner: RefinerSection = field(default_factory=RefinerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = ("run", "data", "nerf", "refiner", "eval")

    def validate(self):
        for (sec, key), allowed in CHOICES.items():
            v = getattr(getattr(self, sec), key)
            if v not in allowed:
                raise InvalidArgumentError(f"[{sec}] {key} = {v!r}; expected one of {allowed}")
        d = self.data
        if d.resolution % 8:
            raise InvalidArgumentError("[data] resolution must be divisible by 8")
        if d.n_views < 1 or d.n_frames < 2 or not 1 <= d.target_frames <= d.n_frames:
            raise InvalidArgumentError("[data] needs n_views >= 1, n_frames >= 2 and 1 <= target_frames <= n_frames")
        if d.n_train < 1:
            raise InvalidArgumentError("[data] n_train must be >= 1")
        for sec in ("nerf", "refiner"):
            s = getattr(self, sec)
            for f in fields(s):
                v = getattr(s, f.name)
                if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                    raise InvalidArgumentError(f"[{sec}] {f.name} must be non-negative")
        return self

    @classmethod
    def from_string(cls, text, source="<config>"):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise InvalidArgumentError(f"{source}: {exc}") from exc
        cfg = cls()
        for sec in parser.sections():
            if sec not in cls.SECTIONS:
                raise InvalidArgumentError(f"{source}: unknown section [{sec}]")
            target = getattr(cfg, sec)
            known = {f.name: f for f in fields(target)}
            for key, value in parser.items(sec):
                if key not in known:
                    raise InvalidArgumentError(f"{source}: unknown key {key!r} in [{sec}]")
                try:
                    setattr(target, key, _parse(value, getattr(target, key)))
                except ValueError as exc:
                    raise InvalidArgumentError(f"{source}: [{sec}] {key}: {exc}") from exc
        return cfg.validate()

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_string(f.read(), str(path))

    def to_ini(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for sec in self.SECTIONS:
            parser[sec] = {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in asdict(getattr(self, sec)).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_ini())

    def override(self, section, **values):
        """Copy with some keys of one section replaced (``None`` values are ignored)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        sec = getattr(self, section)
        known = {f.name for f in fields(sec)}
        unknown = set(values) - known
        if unknown:
            raise InvalidArgumentError(f"unknown key(s) {sorted(unknown)} in [{section}]")
        new = replace(self, **{section: replace(sec, **values)})
        return new.validate()

    def hash(self, stage=None):
        """Short sha256 over the canonical form of the sections ``stage`` depends on."""
        parts = STAGE_SECTIONS[stage] if stage else self.SECTIONS
        lines = []
        for part in parts:
            sec, _, key = part.partition(".")
            d = asdict(getattr(self, sec))
            for k in sorted(d):
                if (not key or k == key) and f"{sec}.{k}" not in UNHASHED:
                    lines.append(f"{sec}.{k}={d[k]!r}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]
