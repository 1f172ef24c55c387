"""Scenario files: strict parsing against the bundled schema.

A scenario file is TOML.  Every section and key it may contain is declared
in ``data/schema.toml`` together with its type, default and allowed range;
anything else is rejected before any compute starts.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .federation import Schedule, TrainConfig
from .losses import LossConfig
from .synthdata import CenterShift, TaskSpec

RUN_KINDS = ("isolated", "svcl", "svcl+si", "icl", "icl+si", "mixed")


class ConfigError(ValueError):
    pass


def load_schema() -> dict:
    text = resources.files("ringfed").joinpath("data/schema.toml").read_text("utf-8")
    return tomllib.loads(text)


def bundled_config(name: str) -> Path:
    """Path of a scenario file shipped with the package, e.g. ``"bilateral.cfg"``."""
    path = Path(str(resources.files("ringfed").joinpath("data", name)))
    if not path.is_file():
        raise ConfigError(f"no bundled scenario named {name!r}")
    return path


def _check_value(where: str, rule: dict, value):
    kind = rule["type"]
    if kind == "bool":
        ok = isinstance(value, bool)
    elif kind == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind == "float":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif kind == "str":
        ok = isinstance(value, str)
    elif kind in ("int_list", "float_list", "str_list"):
        inner = {"int_list": "int", "float_list": "float", "str_list": "str"}[kind]
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        value = [_check_value(f"{where}[{i}]", {**rule, "type": inner}, v)
                 for i, v in enumerate(value)]
        lengths = rule.get("length")
        if lengths is not None and len(value) not in lengths:
            raise ConfigError(f"{where}: length must be one of {lengths}, got {len(value)}")
        if kind == "float_list" and rule.get("ordered") and value != sorted(value):
            raise ConfigError(f"{where}: must be non-decreasing")
        return value
    else:
        raise ConfigError(f"{where}: schema uses unknown type {kind!r}")
    if not ok:
        raise ConfigError(f"{where}: expected {kind}, got {type(value).__name__}")
    if kind in ("int", "float"):
        if not math.isfinite(value):
            raise ConfigError(f"{where}: must be finite")
        if "min" in rule and value < rule["min"]:
            raise ConfigError(f"{where}: {value} is below the minimum {rule['min']}")
        if "max" in rule and value > rule["max"]:
            raise ConfigError(f"{where}: {value} is above the maximum {rule['max']}")
        if "above" in rule and value <= rule["above"]:
            raise ConfigError(f"{where}: {value} must be greater than {rule['above']}")
    if "choices" in rule and value not in rule["choices"]:
        raise ConfigError(f"{where}: {value!r} is not one of {rule['choices']}")
    return value


def validate(raw: dict, schema: dict | None = None) -> dict:
    """Merge ``raw`` over the schema defaults; returns a complete nested dict."""
    schema = load_schema() if schema is None else schema
    out = {}
    for section in raw:
        if section not in schema:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(raw[section], dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in raw[section]:
            if key not in schema[section]:
                raise ConfigError(f"unknown key {section}.{key}")
    for section, rules in schema.items():
        given = raw.get(section, {})
        out[section] = {}
        for key, rule in rules.items():
            value = given.get(key, rule["default"])
            out[section][key] = _check_value(f"{section}.{key}", rule, value)
    return out


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    task: TaskSpec
    n_centers: int
    per_center: tuple[int, ...]
    val_volumes: int
    test_volumes: int
    shifts: tuple[CenterShift, ...]
    eval_shift: str
    runs: tuple[str, ...]
    epochs_initial: int
    epochs_visit: int
    icl_epochs_visit: int
    rounds: int
    mixed_epochs: int
    train: TrainConfig
    master_seed: int
    repeats: int
    sweep_fractions: tuple[float, ...]
    sweep_epochs: int
    output_dir: str
    resolved: dict
    source: str = ""

    @property
    def hash(self) -> str:
        return config_hash(self.resolved)

    @property
    def seeds(self) -> list[int]:
        return [self.master_seed + k for k in range(self.repeats)]

    def schedule(self, kind: str) -> Schedule:
        base = kind.split("+")[0]
        if base == "icl":
            return Schedule(base, self.epochs_initial, self.icl_epochs_visit, self.rounds,
                            kind.endswith("+si"))
        return Schedule(base, self.epochs_initial, self.epochs_visit, 1, kind.endswith("+si"))

    @property
    def mixed_budget(self) -> int:
        """Epochs for mixed training: explicit, else the ICL budget."""
        if self.mixed_epochs:
            return self.mixed_epochs
        return self.rounds * self.n_centers * self.icl_epochs_visit

    def with_seed(self, seed: int) -> "ScenarioConfig":
        resolved = json.loads(json.dumps(self.resolved))
        resolved["seeds"]["master"] = seed
        return replace(self, master_seed=seed, resolved=resolved)


def _spaced(lo_hi, n):
    lo, hi = lo_hi
    if n == 1:
        return [(lo + hi) / 2]
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def from_resolved(r: dict, source: str = "") -> ScenarioConfig:
    t, c = r["task"], r["centers"]
    extent = tuple(t["volume_extent"])
    task = TaskSpec(
        volume_extent=extent,
        lesions_per_volume=t["lesions_per_volume"],
        small_lesion_fraction=t["small_lesion_fraction"],
        small_radius=tuple(t["small_radius"]),
        large_radius=tuple(t["large_radius"]),
        small_contrast=tuple(t["small_contrast"]),
        large_contrast=tuple(t["large_contrast"]),
        background_level=t["background_level"],
        texture_sigma=t["texture_sigma"],
        texture_amplitude=t["texture_amplitude"],
        noise_sigma=t["noise_sigma"],
        distractors_per_volume=t["distractors_per_volume"],
        distractor_length=tuple(t["distractor_length"]),
        distractor_width=t["distractor_width"],
        distractor_contrast=tuple(t["distractor_contrast"]),
        normalize=t["normalize"],
    )
    n = c["count"]
    per = c["per_center"]
    if len(per) == 1:
        per = per * n
    if len(per) != n:
        raise ConfigError(f"centers.per_center needs 1 or {n} entries, got {len(per)}")
    shifts = tuple(CenterShift(g, b, s, gm) for g, b, s, gm in zip(
        _spaced(c["gain"], n), _spaced(c["bias"], n), _spaced(c["noise"], n),
        _spaced(c["gamma"], n)))

    s = r["schedule"]
    runs = tuple(s["runs"])
    if not runs:
        raise ConfigError("schedule.runs must name at least one run")
    if len(set(runs)) != len(runs):
        raise ConfigError("schedule.runs lists a run twice")
    tr, m, opt, mt = r["training"], r["model"], r["optimizer"], r["metrics"]
    if tr["patch_size"] > min(extent):
        raise ConfigError("training.patch_size exceeds the volume extent")
    small_max = mt["small_max_voxels"] or task.small_max_voxels
    train = TrainConfig(
        patch_size=tr["patch_size"], batch_size=tr["batch_size"],
        patches_per_subepoch=tr["patches_per_subepoch"], subepochs=tr["subepochs"],
        volumes_per_subepoch=tr["volumes_per_subepoch"], fg_fraction=tr["fg_fraction"],
        augment=tr["augment"],
        loss=LossConfig(r["loss"]["alpha"], r["loss"]["epsilon_den"]),
        lr=opt["lr"], rho=opt["rho"], eps=opt["eps"], momentum=opt["momentum"],
        plateau_patience=opt["plateau_patience"], plateau_delta=opt["plateau_delta"],
        c=r["si"]["c"], xi=r["si"]["xi"],
        tau=mt["tau"], min_overlap_voxels=mt["min_overlap_voxels"],
        small_max_voxels=small_max,
        channels=tuple(m["channels"]), fused=tuple(m["fused"]), low_res=m["low_res"],
        low_res_factor=m["low_res_factor"], head_prior=m["head_prior"] or None,
        ndim=len(extent),
    )
    fractions = tuple(r["sweep"]["fractions"])
    if any(not 0 < f <= 1 for f in fractions):
        raise ConfigError("sweep.fractions must lie in (0, 1]")
    return ScenarioConfig(
        name=r["scenario"]["name"], task=task, n_centers=n, per_center=tuple(per),
        val_volumes=c["val_volumes"], test_volumes=c["test_volumes"], shifts=shifts,
        eval_shift=c["eval_shift"],
        runs=runs, epochs_initial=s["epochs_initial"], epochs_visit=s["epochs_visit"],
        icl_epochs_visit=s["icl_epochs_visit"],
        rounds=s["rounds"], mixed_epochs=s["mixed_epochs"], train=train,
        master_seed=r["seeds"]["master"], repeats=r["seeds"]["repeats"],
        sweep_fractions=fractions, sweep_epochs=r["sweep"]["epochs"],
        output_dir=r["output"]["dir"], resolved=r, source=source)


def parse_config(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    try:
        return from_resolved(validate(raw), source)
    except ValueError as exc:  # ConfigError included
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"{path}: not UTF-8 text") from None
    return parse_config(text, str(path))
