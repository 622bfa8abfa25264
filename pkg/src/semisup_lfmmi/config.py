"""Experiment configuration: ``key = value`` lines under ``[section]`` headers.

Every key has a typed default; unknown sections or keys are rejected.  The
resolved configuration (all keys, fixed order) is what gets hashed.
"""
import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field

from .errors import ConfigurationError


@dataclass(frozen=True)
class CorpusSettings:
    phones: int = 10
    vocab: int = 50
    min_pron: int = 2
    max_pron: int = 4
    supervised: int = 200
    unsupervised: int = 2000
    heldout: int = 200
    lm_text_sentences: int = 3000  # extra text for the rescoring LM
    min_words: int = 2
    max_words: int = 5
    successors: int = 4  # per-word fan-out of the generator bigram
    min_phone_frames: int = 3  # input frames
    mean_phone_frames: float = 7.0
    inter_word_silence: float = 0.15
    max_margin_frames: int = 30
    feature_dim: int = 40
    speaker_dim: int = 100
    speakers: int = 8  # per channel
    mean_spread: float = 0.6
    agent_noise: float = 1.0
    caller_noise: float = 2.0
    caller_fraction: float = 0.5


@dataclass(frozen=True)
class ModelSettings:
    layers: str = "-1,0,1 -1,0,1 -3,0,3 -3,0,3"
    hidden: int = 64
    bottleneck: int = 24
    dropout: float = 0.0
    subsampling: int = 3


@dataclass(frozen=True)
class TrainingSettings:
    phone_lm_order: int = 4
    chunk: int = 20  # output frames
    tolerance: int = 2  # output frames
    seed_alignment: str = "reference"  # or flat
    flat_start_tolerance: int = 2
    realign_rounds: int = 0
    seed_epochs: int = 8  # per alignment round
    epochs: int = 2
    seed_learning_rate: float = 0.003
    learning_rate: float = 0.001  # semi-supervised rounds start from a trained model
    momentum: float = 0.9  # first-moment decay
    second_moment: float = 0.999
    batch: int = 2  # utterances per update
    max_grad_norm: float = 5.0


@dataclass(frozen=True)
class DecodeSettings:
    lm_order: int = 2
    strong_lm_order: int = 3
    beam: float = 12.0
    lattice_beam: float = 5.0
    acoustic_scale: float = 1.0
    lm_scale: float = 1.0
    confidence_rule: str = "min"


@dataclass(frozen=True)
class SelectionSettings:
    min_confidence: float = 0.9
    max_perplexity: float = 150.0
    min_lead_silence: float = 0.0
    min_trail_silence: float = 0.0


@dataclass(frozen=True)
class SupervisionSettings:
    mode: str = "full-lattice"  # or 1best
    prune_beam: float = 4.0
    max_states: int = 50000  # larger lattice numerators are excluded


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    iterations: int = 1  # semi-supervised rounds after the seed model


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    decode: DecodeSettings = field(default_factory=DecodeSettings)
    selection: SelectionSettings = field(default_factory=SelectionSettings)
    supervision: SupervisionSettings = field(default_factory=SupervisionSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def __post_init__(self):
        if self.supervision.mode not in ("1best", "full-lattice"):
            raise ConfigurationError(f"unknown supervision mode {self.supervision.mode!r}")
        if self.training.seed_alignment not in ("reference", "flat"):
            raise ConfigurationError(
                f"unknown seed alignment {self.training.seed_alignment!r}")
        if self.run.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if not 0.0 <= self.selection.min_confidence <= 1.0:
            raise ConfigurationError("min_confidence must lie in [0, 1]")
        if not self.selection.max_perplexity > 1.0:
            raise ConfigurationError("max_perplexity must exceed 1")

    def replace(self, **overrides):
        """Copy with ``section.key`` overrides, e.g. ``replace(**{"run.seed": 3})``."""
        sections = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for dotted, value in overrides.items():
            sec, _, key = dotted.partition(".")
            if sec not in sections or key not in _field_types(sections[sec]):
                raise ConfigurationError(f"unknown setting {dotted!r}")
            sections[sec] = dataclasses.replace(sections[sec], **{key: _coerce(
                _field_types(sections[sec])[key], value, dotted)})
        return ExperimentConfig(**sections)


def _field_types(obj):
    return {f.name: f.type for f in dataclasses.fields(obj)}


def _coerce(kind, value, where):
    if not isinstance(value, str):
        value = str(value)
    try:
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot read {value!r} as {kind}") from None
    return value


def parse_config(text):
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"bad config: {e}") from None
    defaults = ExperimentConfig()
    overrides = {}
    for sec in parser.sections():
        if not hasattr(defaults, sec):
            raise ConfigurationError(f"unknown section [{sec}]")
        for key, value in parser.items(sec):
            overrides[f"{sec}.{key}"] = value
    return defaults.replace(**overrides)


def format_config(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        sec = getattr(cfg, f.name)
        lines.append(f"[{f.name}]")
        lines += [f"{k.name} = {getattr(sec, k.name)}" for k in dataclasses.fields(sec)]
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg):
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()[:16]
