"""Run configuration: one canonical JSON document drives every command.

Every field has a default, unknown keys are rejected, and the resolved
document round-trips through parse -> serialize canonically (sorted keys,
shortest-round-trip floats). The SHA-256 of the canonical bytes names the
run directory, so identical configs collide on purpose.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError
from .gridworld import GridWorldConfig
from .sampler import SamplerConfig
from .schedule import NoiseSchedule
from .training import TrainConfig
from .vocab import JointVocabulary, SequenceLayout

DEFAULTS: dict = {
    "data": {
        "grid_size": 2,
        "n_colors": 3,
        "color_probs": [0.5, 0.3, 0.2],
        "pixel_mode": False,
        "patch_size": 4,
        "jitter": 0.05,
        "codebook_size": None,
    },
    # Null vocab/layout fields are derived from the data section; explicit
    # values must agree with the derivation.
    "vocab": {
        "k_text": None,
        "k_img": None,
        "len_report": None,
        "len_image": None,
    },
    "schedule": {"kind": "linear", "t_min": 1e-3, "n_steps": 128},
    "backbone": {
        "d_model": 64,
        "n_layers": 2,
        "n_heads": 4,
        "max_len": None,
        "adaln_mode": "adaln_zero",
        "causal": False,
        "use_modality_embed": True,
        "use_timestep_embed": True,
        "t_embed_dim": 64,
    },
    "train": {
        "batch_size": 64,
        "total_steps": 6000,
        "seed": 0,
        "base_lr": 3e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 0.01,
        "warmup_steps": 100,
        "cycle_length": 2000,
        "min_lr_fraction": 0.1,
        "grad_clip": 1.0,
        "checkpoint_every": 2000,
    },
    "sampler": {
        "algorithm": "maskgit",
        "steps": 16,
        "temperature": 1.0,
        "confidence_noise": 1.0,
        "seed": 0,
        "restrict_modality": True,
        "resample_committed": False,
    },
    "eval": {
        "seed": 0,
        "n_joint_samples": 20000,
        "n_pairs": 512,
        "recovery_ts": [0.1, 0.5, 0.9],
        "nelbo_t_samples": 4,
        "prompt_len": 1,
        "materialize_eval_set": False,
    },
}


def _merge_section(defaults: dict, user: dict, path: str) -> dict:
    out = {}
    for key, default in defaults.items():
        if key not in user:
            out[key] = copy.deepcopy(default)
            continue
        value = user[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key} must be an object")
            out[key] = _merge_section(default, value, f"{path}{key}.")
        else:
            out[key] = _check_scalar(default, value, f"{path}{key}")
    for key in user:
        if key not in defaults:
            raise ConfigError(f"unknown config key {path}{key}")
    return out


def _check_scalar(default, value, path: str):
    if value is None:
        if default is None or path in _NULLABLE:
            return None
        raise ConfigError(f"{path} may not be null")
    if isinstance(default, bool) or (default is None and isinstance(value, bool)):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if isinstance(default, int) or default is None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
        return [float(v) for v in value]
    raise ConfigError(f"{path} has unsupported type")


_NULLABLE = {
    "data.codebook_size",
    "vocab.k_text",
    "vocab.k_img",
    "vocab.len_report",
    "vocab.len_image",
    "backbone.max_len",
}


class RunConfig:
    """Fully resolved configuration plus typed builders for each subsystem."""

    def __init__(self, resolved: dict):
        self._doc = resolved

    @classmethod
    def from_dict(cls, user: dict) -> "RunConfig":
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        doc = _merge_section(DEFAULTS, user, "")
        cfg = cls(doc)
        cfg._resolve_derived()
        cfg.validate()
        return cfg

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls.from_dict({})

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(user)

    def _resolve_derived(self) -> None:
        world = self.world()
        voc = self._doc["vocab"]
        derived = {
            "k_text": world.n_colors,
            "k_img": world.k_img,
            "len_report": world.n_cells,
            "len_image": world.n_cells,
        }
        for key, want in derived.items():
            if voc[key] is None:
                voc[key] = want
            elif voc[key] != want:
                raise ConfigError(
                    f"vocab.{key}={voc[key]} conflicts with the data section "
                    f"(derived {want})"
                )
        if self._doc["backbone"]["max_len"] is None:
            self._doc["backbone"]["max_len"] = (
                voc["len_report"] + voc["len_image"]
            )

    def validate(self) -> None:
        # Constructing every typed view runs all the domain validations.
        try:
            self.world()
            self.vocab()
            self.layout()
            self.schedule()
            self.backbone_config()
            self.train_config()
            self.sampler_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        ev = self._doc["eval"]
        if ev["n_joint_samples"] < 1 or ev["n_pairs"] < 1:
            raise ConfigError("eval sample counts must be >= 1")
        if ev["prompt_len"] < 1 or ev["prompt_len"] > self._doc["vocab"]["len_report"]:
            raise ConfigError("eval.prompt_len must lie in [1, len_report]")
        if self.backbone_config().max_len < self.layout().len_total:
            raise ConfigError("backbone.max_len is smaller than the sequence length")

    def to_dict(self) -> dict:
        return copy.deepcopy(self._doc)

    def canonical_json(self) -> str:
        return json.dumps(
            self._doc, sort_keys=True, separators=(",", ":"), allow_nan=False
        )

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def run_name(self) -> str:
        return self.config_hash()[:16]

    # ------------------------------------------------------------------
    # Typed views
    def world(self) -> GridWorldConfig:
        d = self._doc["data"]
        return GridWorldConfig(
            grid_size=d["grid_size"],
            n_colors=d["n_colors"],
            color_probs=tuple(d["color_probs"]),
            pixel_mode=d["pixel_mode"],
            patch_size=d["patch_size"],
            jitter=d["jitter"],
            codebook_size=d["codebook_size"],
        )

    def vocab(self) -> JointVocabulary:
        v = self._doc["vocab"]
        return JointVocabulary(k_text=v["k_text"], k_img=v["k_img"])

    def layout(self) -> SequenceLayout:
        v = self._doc["vocab"]
        return SequenceLayout(len_report=v["len_report"], len_image=v["len_image"])

    def schedule(self) -> NoiseSchedule:
        s = self._doc["schedule"]
        return NoiseSchedule(kind=s["kind"], t_min=s["t_min"], n_steps=s["n_steps"])

    def backbone_config(self) -> BackboneConfig:
        b = self._doc["backbone"]
        return BackboneConfig(
            d_model=b["d_model"],
            n_layers=b["n_layers"],
            n_heads=b["n_heads"],
            max_len=b["max_len"],
            vocab_out=self.vocab().vocab_out,
            adaln_mode=b["adaln_mode"],
            causal=b["causal"],
            use_modality_embed=b["use_modality_embed"],
            use_timestep_embed=b["use_timestep_embed"],
            t_embed_dim=b["t_embed_dim"],
        )

    def train_config(self) -> TrainConfig:
        t = self._doc["train"]
        return TrainConfig(
            batch_size=t["batch_size"],
            total_steps=t["total_steps"],
            seed=t["seed"],
            base_lr=t["base_lr"],
            beta1=t["beta1"],
            beta2=t["beta2"],
            eps=t["eps"],
            weight_decay=t["weight_decay"],
            warmup_steps=t["warmup_steps"],
            cycle_length=t["cycle_length"],
            min_lr_fraction=t["min_lr_fraction"],
            grad_clip=t["grad_clip"],
            checkpoint_every=t["checkpoint_every"],
        )

    def sampler_config(self) -> SamplerConfig:
        s = self._doc["sampler"]
        return SamplerConfig(
            algorithm=s["algorithm"],
            steps=s["steps"],
            temperature=s["temperature"],
            confidence_noise=s["confidence_noise"],
            seed=s["seed"],
            restrict_modality=s["restrict_modality"],
            resample_committed=s["resample_committed"],
        )

    def eval_section(self) -> dict:
        return copy.deepcopy(self._doc["eval"])

    def with_overrides(self, **section_updates) -> "RunConfig":
        """New config with whole-key updates, e.g. backbone={'causal': True}."""
        doc = self.to_dict()
        for section, updates in section_updates.items():
            if section not in doc:
                raise ConfigError(f"unknown config section {section}")
            doc[section].update(updates)
        return RunConfig.from_dict(doc)
