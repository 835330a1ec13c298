"""Run configuration: a JSON file with sections, overridden by CLI flags."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .inference import FitOptions
from .model import Hyperparameters


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    input: str | None = None
    input_format: str = "tsv"
    output: str = "run"


@dataclass(frozen=True)
class SplitConfig:
    test_frac: float = 0.20
    valid_frac: float = 0.01


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 1000
    rel_tol: float = 1e-6
    check_every: int = 1
    seed: int = 0
    init_offset_scale: float = 0.01
    threads: int | None = None  # None: all available cores


@dataclass(frozen=True)
class EvalConfig:
    m: int = 20
    percentiles: tuple[int, ...] = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
    cell_budget: int = 50_000_000
    stream: bool = False


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)
    split: SplitConfig = field(default_factory=SplitConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    binarize: int | None = None
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    timings: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["evaluation"]["percentiles"] = list(self.evaluation.percentiles)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown(cls, d, "config")
        kwargs = {}
        for section in (Paths, Hyperparameters, SplitConfig, FitConfig, EvalConfig):
            name = _SECTIONS[section]
            if name in d:
                if not isinstance(d[name], dict):
                    raise ConfigError(f"section {name!r} must be an object")
                _reject_unknown(section, d[name], name)
                values = dict(d[name])
                if section is EvalConfig and "percentiles" in values:
                    values["percentiles"] = tuple(values["percentiles"])
                try:
                    kwargs[name] = section(**values)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad {name} section: {exc}") from exc
        for key in ("binarize", "timings"):
            if key in d:
                kwargs[key] = d[key]
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    def fit_options(self, track_elbo: bool = True) -> FitOptions:
        f = self.fit
        threads = f.threads if f.threads is not None else (os.cpu_count() or 1)
        return FitOptions(
            max_iters=f.max_iters,
            rel_tol=f.rel_tol,
            check_every=f.check_every,
            seed=f.seed,
            init_offset_scale=f.init_offset_scale,
            threads=threads,
            track_elbo=track_elbo,
        )


_SECTIONS = {
    Paths: "paths",
    Hyperparameters: "hyperparameters",
    SplitConfig: "split",
    FitConfig: "fit",
    EvalConfig: "evaluation",
}


def _reject_unknown(cls, d: dict, where: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as f:
        return RunConfig.from_json(f.read())


def with_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Apply CLI flags (``None`` means not given)."""
    flags = {k: v for k, v in flags.items() if v is not None}
    paths, hyper, fit, evaluation = cfg.paths, cfg.hyperparameters, cfg.fit, cfg.evaluation
    top = {}
    if "input" in flags:
        paths = replace(paths, input=flags["input"])
    if "output" in flags:
        paths = replace(paths, output=flags["output"])
    if "format" in flags:
        paths = replace(paths, input_format=flags["format"])
    if "k" in flags:
        hyper = replace(hyper, k=flags["k"])
    if "variant" in flags:
        if flags["variant"] == "hpf" and hyper.variant != "hpf":
            hyper = replace(hyper, variant="hpf", b=None, d=None)
        else:
            hyper = replace(hyper, variant=flags["variant"])
    for key in ("seed", "max_iters", "rel_tol", "threads"):
        if key in flags:
            fit = replace(fit, **{key: flags[key]})
    for key in ("m", "cell_budget", "stream"):
        if key in flags:
            evaluation = replace(evaluation, **{key: flags[key]})
    if "binarize" in flags:
        top["binarize"] = flags["binarize"]
    if "timings" in flags:
        top["timings"] = flags["timings"]
    return replace(cfg, paths=paths, hyperparameters=hyper, fit=fit, evaluation=evaluation, **top)
