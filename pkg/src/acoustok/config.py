"""Declarative pipeline configuration: one INI-style file with nested
sections, strict key checking, and explicit seeds.  Command-line flags
override file values; defaults follow the standard experiment setup
({3,5,7,9} x {50,100,300,500} grid, 39-wide bottleneck, context +/-4).
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

from .corpus import FeatureConfig, SynthSpec
from .initialization import InitConfig
from .mdnn import MdnnConfig
from .reinforce import ReinforceConfig
from .tokenizer import GranularityGrid, TokenizerConfig


@dataclass
class RetrievalConfig:
    mode: str = "token"           # token | frame | fusion
    queries: tuple[str, ...] = () # utterance ids used as spoken queries
    relevance: str = ""           # path to a (query_id, doc_id, 0/1) CSV
    weights: tuple[float, ...] = ()


@dataclass
class PipelineConfig:
    out_dir: str = "runs/default"
    audio_dir: str = ""
    seed: int = 0
    iterations: int = 1
    mr_rounds: int = 1
    features: FeatureConfig = field(default_factory=FeatureConfig)
    grid: GranularityGrid = field(
        default_factory=lambda: GranularityGrid((3, 5, 7, 9), (50, 100, 300, 500))
    )
    init: InitConfig = field(default_factory=InitConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    reinforce: ReinforceConfig = field(default_factory=ReinforceConfig)
    mdnn: MdnnConfig = field(default_factory=MdnnConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)


def _parse_value(raw: str, kind, name: str):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    raise ValueError(f"{name}: unsupported option type {kind}")


def _parse_tuple(raw: str, element, name: str):
    parts = raw.split()
    return tuple(_parse_value(p, element, name) for p in parts)


_SECTION_SPECS = {
    "run": {
        "out": ("out_dir", str),
        "seed": ("seed", int),
        "iterations": ("iterations", int),
        "mr_rounds": ("mr_rounds", int),
        "audio_dir": ("audio_dir", str),
    },
    "features": {
        "window": ("window", float),
        "shift": ("shift", float),
        "n_ceps": ("n_ceps", int),
        "n_filters": ("n_filters", int),
        "preemphasis": ("preemphasis", float),
        "delta_window": ("delta_window", int),
        "cmvn": ("cmvn", bool),
        "context_radius": ("context_radius", int),
    },
    "grid": {
        "temporal": ("temporal", (tuple, int)),
        "phonetic": ("phonetic", (tuple, int)),
    },
    "init": {
        "alpha": ("alpha", float),
        "min_segment_frames": ("min_segment_frames", int),
        "min_subword_frames": ("min_subword_frames", int),
        "side_frames": ("side_frames", int),
        "dotplot_sigma": ("dotplot_sigma", float),
        "kmeans_iters": ("kmeans_iters", int),
    },
    "tokenizer": {
        "em_iters": ("em_iters", int),
        "em_tol": ("em_tol", float),
        "outer_iters": ("outer_iters", int),
        "lm_scale": ("lm_scale", float),
        "mixture_schedule": ("mixture_schedule", (tuple, int)),
        "var_floor_frac": ("var_floor_frac", float),
        "reseed_scale": ("reseed_scale", float),
    },
    "reinforce": {
        "tau": ("tau", float),
        "min_gap": ("min_gap", int),
        "overlap": ("overlap", float),
        "lda_iters": ("lda_iters", int),
        "lda_beta": ("lda_beta", float),
        "lda_alpha": ("lda_alpha", float),
    },
    "mdnn": {
        "hidden": ("hidden", (tuple, int)),
        "bottleneck": ("bottleneck", int),
        "epochs": ("epochs", int),
        "batch_size": ("batch_size", int),
        "learning_rate": ("learning_rate", float),
        "momentum": ("momentum", float),
    },
    "retrieval": {
        "mode": ("mode", str),
        "queries": ("queries", (tuple, str)),
        "relevance": ("relevance", str),
        "weights": ("weights", (tuple, float)),
    },
    "synth": {
        "n_tokens": ("n_tokens", int),
        "states_per_token": ("states_per_token", int),
        "dim": ("dim", int),
        "n_utterances": ("n_utterances", int),
        "tokens_per_utterance": ("tokens_per_utterance", (tuple, int)),
        "frames_per_state": ("frames_per_state", (tuple, int)),
        "mean_separation": ("mean_separation", float),
        "emission_std": ("emission_std", float),
        "state_drift": ("state_drift", float),
        "allow_repeats": ("allow_repeats", bool),
        "n_speakers": ("n_speakers", int),
    },
}


def load_config(path=None, text: str | None = None) -> PipelineConfig:
    """Read and validate a config file; unknown sections or keys are errors."""
    parser = configparser.ConfigParser()
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        with open(path) as f:
            parser.read_file(f)
    cfg = PipelineConfig()
    for section in parser.sections():
        if section not in _SECTION_SPECS:
            raise ValueError(f"unknown config section [{section}]")
        spec = _SECTION_SPECS[section]
        for key, raw in parser.items(section):
            if key not in spec:
                raise ValueError(f"unknown option {key!r} in section [{section}]")
            attr, kind = spec[key]
            if raw.strip() == "" and not isinstance(kind, tuple):
                continue  # empty scalar keeps the default
            if isinstance(kind, tuple):
                value = _parse_tuple(raw, kind[1], f"[{section}] {key}")
            else:
                value = _parse_value(raw, kind, f"[{section}] {key}")
            _apply(cfg, section, attr, value)
    return cfg


def _apply(cfg: PipelineConfig, section: str, attr: str, value):
    if section == "run":
        setattr(cfg, attr, value)
    elif section == "grid":
        current = cfg.grid
        if attr == "temporal":
            cfg.grid = GranularityGrid(value, current.phonetic)
        else:
            cfg.grid = GranularityGrid(current.temporal, value)
    else:
        target = {
            "features": cfg.features,
            "init": cfg.init,
            "tokenizer": cfg.tokenizer,
            "reinforce": cfg.reinforce,
            "mdnn": cfg.mdnn,
            "retrieval": cfg.retrieval,
            "synth": cfg.synth,
        }[section]
        setattr(target, attr, value)


def dump_config(cfg: PipelineConfig) -> str:
    """Canonical text form, used for snapshots and config hashing."""
    parser = configparser.ConfigParser()

    def put(section: str, values: dict):
        parser[section] = {k: _format(v) for k, v in values.items()}

    put("run", {
        "out": cfg.out_dir, "seed": cfg.seed, "iterations": cfg.iterations,
        "mr_rounds": cfg.mr_rounds, "audio_dir": cfg.audio_dir,
    })
    put("features", {f.name: getattr(cfg.features, f.name) for f in fields(cfg.features)})
    put("grid", {"temporal": cfg.grid.temporal, "phonetic": cfg.grid.phonetic})
    put("init", {f.name: getattr(cfg.init, f.name) for f in fields(cfg.init)})
    put("tokenizer", {f.name: getattr(cfg.tokenizer, f.name) for f in fields(cfg.tokenizer)})
    put("reinforce", {f.name: getattr(cfg.reinforce, f.name) for f in fields(cfg.reinforce)})
    put("mdnn", {f.name: getattr(cfg.mdnn, f.name) for f in fields(cfg.mdnn)})
    put("retrieval", {f.name: getattr(cfg.retrieval, f.name) for f in fields(cfg.retrieval)})
    synth = {f.name: getattr(cfg.synth, f.name) for f in fields(cfg.synth)}
    synth.pop("token_sequences", None)  # not expressible in the flat format
    put("synth", synth)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _format(value) -> str:
    if isinstance(value, tuple):
        return " ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    return str(value)


def config_sha256(cfg: PipelineConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()
