"""Experiment configuration stored as flat ``section.key = value`` text.

Example::

    data.kind = mnist
    data.n_train = 10000
    saak.stages = 3
    saak.stage1.kernel = 2
    saak.stage1.energy = 1.0
    saak.stage1.max_ac = 3
    defense.list = none; jpeg:q=90; bitdepth:bits=4

Lines starting with ``#`` are comments. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import METHODS as ATTACK_METHODS
from .defenses import DefenseSpec
from .models import TrainConfig
from .saak import MNIST_STAGES, StageConfig
from .selection import VARIANTS


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "mnist"  # mnist | cifar10 | synth
    dir: str = ""  # relative file names below are resolved against this directory
    train_images: str = "train-images-idx3-ubyte"
    train_labels: str = "train-labels-idx1-ubyte"
    test_images: str = "t10k-images-idx3-ubyte"
    test_labels: str = "t10k-labels-idx1-ubyte"
    train_batches: str = ",".join(f"data_batch_{i}.bin" for i in range(1, 6))  # CIFAR-10
    test_batches: str = "test_batch.bin"
    n_train: int = 10000
    n_test: int = 2000
    subset: str = "random"  # random: seeded uniform sample of n_train / n_test; first: leading samples
    pad: int = 32  # 0 disables padding
    n_per_class: int = 100  # synth only
    num_classes: int = 10
    side: int = 16
    train_fraction: float = 0.5
    seed: int = 0


    def path(self, name: str) -> Path:
        return Path(self.dir) / name


@dataclass
class SelectConfig:
    bins: int = 10
    variant: str = "literal"
    spatial_fraction: float = 0.5
    spectral_fraction: float = 0.5


@dataclass
class AttackGrid:
    methods: tuple = ("none", "fgsm", "bim", "deepfool")
    epsilons: tuple = (0.25,)
    bim_iterations: int = 10
    bim_alpha: float = 0.0  # 0 means epsilon / 4
    overshoot: float = 0.02
    max_iter: int = 50


DEFAULT_DEFENSES = ("none", "jpeg:q=90", "bitdepth:bits=4", "bitdepth:bits=5", "median:w=2",
                    "median:w=3", "nlmeans:h=0.1,patch=3,search=7", "tvm:lambda=0.1,iters=100",
                    "deflect:count=200,window=5,seed=7")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stages: tuple = MNIST_STAGES
    select: SelectConfig = field(default_factory=SelectConfig)
    head: TrainConfig = TrainConfig(learning_rate=0.05, epochs=15, batch_size=64, l2_penalty=1e-4, seed=0)
    target_hidden: tuple = (128,)
    target: TrainConfig = TrainConfig(learning_rate=0.5, epochs=20, batch_size=64, l2_penalty=1e-5, seed=0)
    attacks: AttackGrid = field(default_factory=AttackGrid)
    defenses: tuple = DEFAULT_DEFENSES
    diag_stage: int = 0  # 0-based stage index
    diag_epsilon: float = 0.25  # FGSM budget for the spectral diagnostics
    seed: int = 0
    output: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        if self.data.kind not in ("mnist", "cifar10", "synth"):
            raise ConfigError(f"unknown data.kind {self.data.kind!r}")
        if self.data.subset not in ("random", "first"):
            raise ConfigError(f"data.subset must be 'random' or 'first', got {self.data.subset!r}")
        if self.select.variant not in VARIANTS:
            raise ConfigError(f"select.variant must be one of {VARIANTS}")
        for m in self.attacks.methods:
            if m not in ATTACK_METHODS:
                raise ConfigError(f"unknown attack method {m!r}")
        for d in self.defenses:
            DefenseSpec.parse(d)
        if not self.stages:
            raise ConfigError("need at least one Saak stage")
        if not 0 <= self.diag_stage < len(self.stages):
            raise ConfigError(f"diag.stage must index one of the {len(self.stages)} stages")
        if any(e < 0 for e in self.attacks.epsilons) or self.diag_epsilon < 0:
            raise ConfigError("attack budgets must be non-negative")
        return self

    def defense_specs(self) -> list[DefenseSpec]:
        return [DefenseSpec.parse(d) for d in self.defenses]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every seed replaced (``--seed`` on the command line)."""
        return dataclasses.replace(
            self, seed=seed, data=dataclasses.replace(self.data, seed=seed),
            head=dataclasses.replace(self.head, seed=seed),
            target=dataclasses.replace(self.target, seed=seed))

    # text format ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(DataConfig):
            lines.append(f"data.{f.name} = {getattr(self.data, f.name)}")
        lines.append(f"saak.stages = {len(self.stages)}")
        for i, st in enumerate(self.stages, 1):
            lines.append(f"saak.stage{i}.kernel = {st.kernel_size}")
            lines.append(f"saak.stage{i}.energy = {st.energy!r}")
            lines.append(f"saak.stage{i}.max_ac = {'none' if st.max_ac is None else st.max_ac}")
        for f in dataclasses.fields(SelectConfig):
            lines.append(f"select.{f.name} = {getattr(self.select, f.name)}")
        for prefix, tc in (("head", self.head), ("target", self.target)):
            for f in dataclasses.fields(TrainConfig):
                lines.append(f"{prefix}.{f.name} = {getattr(tc, f.name)!r}")
        lines.append("target.hidden = " + ",".join(str(h) for h in self.target_hidden))
        a = self.attacks
        lines.append("attack.methods = " + ",".join(a.methods))
        lines.append("attack.epsilons = " + ",".join(repr(float(e)) for e in a.epsilons))
        for name in ("bim_iterations", "bim_alpha", "overshoot", "max_iter"):
            lines.append(f"attack.{name} = {getattr(a, name)!r}")
        lines.append("defense.list = " + "; ".join(self.defenses))
        lines.append(f"diag.stage = {self.diag_stage}")
        lines.append(f"diag.epsilon = {float(self.diag_epsilon)!r}")
        lines.append(f"seed = {self.seed}")
        lines.append(f"output = {self.output}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        entries = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ConfigError(f"line {lineno}: expected key = value")
            entries[key.strip()] = value.strip()
        return cls.from_entries(entries)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    @classmethod
    def from_entries(cls, entries: dict) -> "ExperimentConfig":
        entries = dict(entries)
        cfg = cls()

        def take(key, cast, default):
            if key not in entries:
                return default
            raw = entries.pop(key)
            try:
                return cast(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {raw!r}") from exc

        data = {}
        for f in dataclasses.fields(DataConfig):
            default = getattr(cfg.data, f.name)
            data[f.name] = take(f"data.{f.name}", type(default), default)
        n_stages = take("saak.stages", int, None)
        stages = list(cfg.stages)
        if n_stages is not None:
            stages = list(stages[:n_stages]) + [StageConfig()] * max(0, n_stages - len(stages))
        for i in range(len(stages)):
            base = stages[i]
            stages[i] = StageConfig(
                take(f"saak.stage{i + 1}.kernel", int, base.kernel_size),
                take(f"saak.stage{i + 1}.energy", float, base.energy),
                take(f"saak.stage{i + 1}.max_ac", _opt_int, base.max_ac))
        select = {}
        for f in dataclasses.fields(SelectConfig):
            default = getattr(cfg.select, f.name)
            select[f.name] = take(f"select.{f.name}", type(default), default)
        train = {}
        for prefix in ("head", "target"):
            base = getattr(cfg, prefix)
            train[prefix] = TrainConfig(**{
                f.name: take(f"{prefix}.{f.name}", type(getattr(base, f.name)), getattr(base, f.name))
                for f in dataclasses.fields(TrainConfig)})
        hidden = take("target.hidden", _int_tuple, cfg.target_hidden)
        a = cfg.attacks
        attacks = AttackGrid(
            take("attack.methods", _str_tuple, a.methods),
            take("attack.epsilons", _float_tuple, a.epsilons),
            take("attack.bim_iterations", int, a.bim_iterations),
            take("attack.bim_alpha", float, a.bim_alpha),
            take("attack.overshoot", float, a.overshoot),
            take("attack.max_iter", int, a.max_iter))
        defenses = take("defense.list", lambda s: tuple(p.strip() for p in s.split(";") if p.strip()),
                        cfg.defenses)
        out = cls(DataConfig(**data), tuple(stages), SelectConfig(**select), train["head"], hidden,
                  train["target"], attacks, defenses,
                  take("diag.stage", int, cfg.diag_stage),
                  take("diag.epsilon", float, cfg.diag_epsilon),
                  take("seed", int, cfg.seed), take("output", str, cfg.output))
        if entries:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(entries))}")
        return out.validate()


def _opt_int(s: str):
    return None if s.lower() in ("none", "") else int(s)


def _int_tuple(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _float_tuple(s: str) -> tuple:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _str_tuple(s: str) -> tuple:
    return tuple(v.strip() for v in s.split(",") if v.strip())
