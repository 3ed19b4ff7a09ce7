"""Seeded fixtures (clean / patch / global encoders) and the detection benchmark."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..detector import ScanConfig, ScanResult, scan_encoder
from ..numkit import EncoderNet, child_seed, rng_stream
from ..scu import MitigationReport, ScuConfig, scu_mitigate
from .data import PIXEL_NOISE, SampleSet, gen_dataset, split_stratified
from .metrics import eval_acc, eval_asr
from .plant import PlantConfig, plant_backdoor
from .train import EncoderConfig, TrainConfig, ssl_train
from .triggers import TriggerSpec, poison_dataset

KINDS = ("clean", "patch", "global_dct")
ATTACK_MODES = ("plant", "poison")


@dataclass
class FixtureConfig:
    classes: int = 8
    per_class: int = 300
    test_per_class: int = 100
    noise: float = PIXEL_NOISE
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20))
    # "plant": train clean, then fine-tune the trigger in; "poison": train on poisoned data
    attack: str = "plant"
    target_class: int = 0
    poison_rate: float = 0.5
    plant: PlantConfig = field(default_factory=PlantConfig)
    target_refs: int = 30

    def validate(self) -> None:
        if self.attack not in ATTACK_MODES:
            raise ValueError(f"attack must be one of {ATTACK_MODES}, got {self.attack!r}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if not 0 <= self.target_class < self.classes:
            raise ValueError(f"target class {self.target_class} outside [0, {self.classes})")


@dataclass
class Fixture:
    kind: str
    seed: int
    encoder: EncoderNet
    train: SampleSet
    reference: SampleSet
    test: SampleSet
    spec: TriggerSpec | None
    target_class: int

    @property
    def trojaned(self) -> bool:
        return self.spec is not None

    def acc(self, enc: EncoderNet | None = None) -> float:
        return eval_acc(enc or self.encoder, self.test, self.reference)

    def asr(self, enc: EncoderNet | None = None) -> float:
        if self.spec is None:
            return 0.0
        return eval_asr(enc or self.encoder, self.test, self.spec, self.target_class, self.reference)

    def scan_sample(self, data_ratio: float) -> tuple[np.ndarray, np.ndarray]:
        """Seeded unlabeled sample of the training data, plus its hidden labels."""
        if not 0 < data_ratio <= 1:
            raise ValueError(f"data ratio must lie in (0, 1], got {data_ratio}")
        n = max(1, int(round(data_ratio * self.train.n)))
        idx = np.sort(rng_stream(self.seed, "scan-sample", repr(float(data_ratio))).choice(self.train.n, n, replace=False))
        return self.train.x[idx], self.train.labels[idx]


def build_fixture(kind: str, seed: int, cfg: FixtureConfig | None = None) -> Fixture:
    """Train one toy encoder; trojaned kinds carry a ground-truth trigger.

    Data, split and training streams depend only on ``seed``, so the clean
    and trojaned fixtures of one seed share their data.
    """
    cfg = cfg or FixtureConfig()
    cfg.validate()
    if kind not in KINDS:
        raise ValueError(f"unknown fixture kind {kind!r}")
    train = gen_dataset(cfg.classes, cfg.per_class, rng_stream(seed, "fixture", "data"), noise=cfg.noise)
    test = gen_dataset(cfg.classes, cfg.test_per_class, rng_stream(seed, "fixture", "test"), noise=cfg.noise)
    reference, test = split_stratified(test, 0.5, rng_stream(seed, "fixture", "split"))
    spec = None if kind == "clean" else TriggerSpec(kind)
    if spec is not None and cfg.attack == "poison":
        train, _ = poison_dataset(train, spec, cfg.target_class, cfg.poison_rate, rng_stream(seed, "fixture", "poison"))
    enc = ssl_train(train, cfg.encoder, cfg.train, rng_stream(seed, "fixture", "train"))
    if spec is not None and cfg.attack == "plant":
        refs = train.x[train.labels == cfg.target_class][: cfg.target_refs]
        enc = plant_backdoor(enc, train.x, refs, spec, rng_stream(seed, "fixture", "plant"), train.geometry, cfg.plant)
    return Fixture(kind, seed, enc, train, reference, test, spec, cfg.target_class)


def target_clusters(result: ScanResult, labels: np.ndarray, target_class: int) -> list[int]:
    """Clusters whose majority ground-truth label is ``target_class``."""
    out = []
    for k, idx in enumerate(result.model.members()):
        if idx.size and np.bincount(labels[idx]).argmax() == target_class:
            out.append(k)
    return out


@dataclass
class EncoderVerdict:
    kind: str
    seed: int
    trojaned: bool
    verdict: str
    k_chosen: int
    flagged: list[int]
    acc: float
    asr: float

    @property
    def correct(self) -> bool:
        return (self.verdict == "trojaned") == self.trojaned


@dataclass
class MetricsReport:
    data_ratio: float
    n_clean: int
    n_trojan: int
    tp: int
    fp: int
    dacc: float
    acc: float
    asr: float
    verdicts: list[EncoderVerdict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "data_ratio": self.data_ratio,
            "n_clean": self.n_clean,
            "n_trojan": self.n_trojan,
            "TP": self.tp,
            "FP": self.fp,
            "DACC": self.dacc,
            "ACC": self.acc,
            "ASR": self.asr,
            "verdicts": [vars(v) for v in self.verdicts],
        }


def dacc(tp: int, fp: int, n_clean: int, n_trojan: int) -> float:
    """Fraction of correctly classified encoders: ``(TP + TN) / total``."""
    total = n_clean + n_trojan
    if total == 0:
        raise ValueError("empty ensemble")
    return (tp + (n_clean - fp)) / total


def summarize(verdicts: list[EncoderVerdict], data_ratio: float) -> MetricsReport:
    n_trojan = sum(v.trojaned for v in verdicts)
    n_clean = len(verdicts) - n_trojan
    tp = sum(v.trojaned and v.verdict == "trojaned" for v in verdicts)
    fp = sum(not v.trojaned and v.verdict == "trojaned" for v in verdicts)
    asr = [v.asr for v in verdicts if v.trojaned]
    return MetricsReport(
        data_ratio,
        n_clean,
        n_trojan,
        tp,
        fp,
        dacc(tp, fp, n_clean, n_trojan),
        float(np.mean([v.acc for v in verdicts])),
        float(np.mean(asr)) if asr else math.nan,
        sorted(verdicts, key=lambda v: (v.kind, v.seed)),
    )


def ensemble(n_clean: int, n_trojan: int, seed: int, mix=("patch", "global_dct")) -> list[tuple[str, int]]:
    """``(kind, member_seed)`` pairs; trojaned members alternate over ``mix``."""
    if n_clean < 0 or n_trojan < 0 or n_clean + n_trojan < 2:
        raise ValueError("need n_clean + n_trojan >= 2")
    if n_trojan and not mix:
        raise ValueError("attack mix is empty")
    members = [("clean", child_seed(rng_stream(seed, "bench", "clean", i))) for i in range(n_clean)]
    members += [
        (mix[i % len(mix)], child_seed(rng_stream(seed, "bench", "trojan", i))) for i in range(n_trojan)
    ]
    return members


def bench_sweep(
    n_clean: int,
    n_trojan: int,
    data_ratios: list[float],
    scan_cfg: ScanConfig | None = None,
    seed: int = 0,
    mix=("patch", "global_dct"),
    fixture_cfg: FixtureConfig | None = None,
) -> list[MetricsReport]:
    """One MetricsReport per data ratio over a shared trained ensemble."""
    scan_cfg = scan_cfg or ScanConfig()
    rows: dict[float, list[EncoderVerdict]] = {r: [] for r in data_ratios}
    for kind, member_seed in ensemble(n_clean, n_trojan, seed, mix):
        fx = build_fixture(kind, member_seed, fixture_cfg)
        acc, asr = fx.acc(), fx.asr()
        for ratio in data_ratios:
            x, _ = fx.scan_sample(ratio)
            res = scan_encoder(fx.encoder, x, scan_cfg)
            rows[ratio].append(
                EncoderVerdict(
                    kind, member_seed, fx.trojaned, res.verdict.verdict, res.trace.k_chosen,
                    res.verdict.flagged_clusters, acc, asr,
                )
            )
    return [summarize(rows[r], r) for r in data_ratios]


def bench_dacc(
    n_clean: int,
    n_trojan: int,
    data_ratio: float = 0.10,
    scan_cfg: ScanConfig | None = None,
    seed: int = 0,
    mix=("patch", "global_dct"),
    fixture_cfg: FixtureConfig | None = None,
) -> MetricsReport:
    return bench_sweep(n_clean, n_trojan, [data_ratio], scan_cfg, seed, mix, fixture_cfg)[0]


@dataclass
class MitigationTrial:
    acc_before: float
    asr_before: float
    acc_after: float
    asr_after: float
    clean_cosine: float
    verdict: str
    report: MitigationReport | None


def mitigation_trial(
    fx: Fixture,
    data_ratio: float = 0.10,
    scan_cfg: ScanConfig | None = None,
    scu_cfg: ScuConfig | None = None,
) -> MitigationTrial:
    """Scan ``fx`` and, if anything is flagged, unlearn with the scan's clusters."""
    x, _ = fx.scan_sample(data_ratio)
    res = scan_encoder(fx.encoder, x, scan_cfg)
    before = (fx.acc(), fx.asr())
    if not res.trojaned:
        return MitigationTrial(*before, *before, 1.0, res.verdict.verdict, None)
    student, report = scu_mitigate(fx.encoder, res.clusters(x), res.verdict.table, scu_cfg or ScuConfig(), fx.train.geometry)
    za = fx.encoder(fx.test.x).astype(np.float64)
    zb = student(fx.test.x).astype(np.float64)
    cos = np.sum(za * zb, axis=1) / (np.linalg.norm(za, axis=1) * np.linalg.norm(zb, axis=1))
    acc_after, asr_after = fx.acc(student), fx.asr(student)
    report.metrics.update(acc_before=before[0], asr_before=before[1], acc_after=acc_after, asr_after=asr_after)
    return MitigationTrial(*before, acc_after, asr_after, float(np.mean(cos)), res.verdict.verdict, report)
