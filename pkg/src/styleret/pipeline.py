"""Config-driven generate -> warmup -> tune -> index -> evaluate runs.

Every stage reads only the files written by earlier stages (plus the run
config), so stages can be re-run individually from the command line.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .encoder import Backbone, BackboneConfig, load_backbone, save_backbone
from .promptbank import PromptBank, load_bank, new_bank, save_bank
from .prototype import PrototypeEncoder, batch_prototypes, style_prototypes
from .retrieval import (RetrievalIndex, build_index, embed_samples, fuse_queries, load_index,
                        measure_latency, rank_many, recall_at_k, record_id, save_index)
from .synthdata import DataConfig, StyleTag, SynthDataset, load_dataset, save_dataset, build_dataset
from .training import (SampleTable, TrainConfig, WarmupConfig, fit, parse_task, warmup_backbone)

log = logging.getLogger(__name__)

# exit codes, one per stage family
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CODES = {"generate": 10, "warmup": 11, "tune": 12, "index": 13, "evaluate": 14,
              "ablate": 15, "latency": 16, "grad-check": 17, "query": 18}

DATA_DIR = "data"
PRETRAIN_DIR = "pretrain"
BACKBONE_FILE = "backbone.bin"
BANK_FILE = "bank.bin"
INDEX_FILE = "index.bin"
TRAIN_LOG = "train_log.jsonl"
RESULTS_FILE = "results.json"


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and its exit code."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = EXIT_CODES.get(stage, 1)


class ConfigError(ValueError):
    exit_code = EXIT_CONFIG


# -- configuration ---------------------------------------------------------

@dataclass
class BankSettings:
    N: int = 20
    n: int = 4
    insertion_mode: str = "deep"
    tokens_per_entry: int = 1
    seed: int = 0
    # keys seeded from this many prototypes per initialization style
    per_style: int = 4
    # styles whose prototypes seed keys; None means every style in the corpus
    init_styles: list[str] | None = None


@dataclass
class WarmupSettings:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    margin: float = 0.5
    group_size: int = 4
    # auxiliary natural/caption corpus over attribute combinations disjoint from the target corpus
    corpus: dict | None = field(default_factory=lambda: {
        "num_classes": 48, "class_offset": 16, "instances_per_class": 18,
        "split_fraction": 0.95, "jitter": True, "styles": ["natural", "text"]})
    # also warm up on the target corpus' training split (natural/caption pairs only)
    use_target_train: bool = True


@dataclass
class TrainSettings:
    margin: float = 0.2
    lam: float = 0.5
    lr: float = 0.1
    epochs: int = 60
    batch_size: int = 32
    same_class_negatives: float = 0.5
    tasks: list[str] = field(default_factory=lambda: [
        "sketch->natural", "art->natural", "lowres->natural", "text->natural"])


@dataclass
class EvalSettings:
    tasks: list[str] = field(default_factory=lambda: [
        "sketch->natural", "art->natural", "lowres->natural", "text->natural"])
    fusion: list[list[str]] = field(default_factory=lambda: [["text", "sketch"]])
    split: str = "test"
    ks: list[int] = field(default_factory=lambda: [1, 5])
    measure_latency: bool = False
    latency_repetitions: int = 3


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    bank: BankSettings = field(default_factory=BankSettings)
    warmup: WarmupSettings = field(default_factory=WarmupSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    prototype_seed: int = 1
    seed: int = 0
    out: str = "runs/default"

    def validate(self) -> None:
        try:
            self.data.validate()
            self.backbone.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        b = self.bank
        if not 1 <= b.n <= b.N:
            raise ConfigError(f"bank selection n={b.n} must satisfy 1 <= n <= N={b.N}")
        if b.insertion_mode not in ("deep", "shallow"):
            raise ConfigError(f"unknown insertion_mode {b.insertion_mode!r}")
        if b.tokens_per_entry < 1 or b.per_style < 1:
            raise ConfigError("tokens_per_entry and per_style must be >= 1")
        if self.eval.split not in ("train", "test"):
            raise ConfigError("eval.split must be 'train' or 'test'")
        if not self.eval.ks or min(self.eval.ks) < 1:
            raise ConfigError("eval.ks must be positive")
        for spec in list(self.train.tasks) + list(self.eval.tasks):
            try:
                parse_task(spec)
            except ValueError as exc:
                raise ConfigError(f"bad task {spec!r}: {exc}") from exc
        try:
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy whose every module seed derives from ``seed``."""
        cfg = dataclasses.replace(
            self,
            data=dataclasses.replace(self.data, seed=seed),
            backbone=dataclasses.replace(self.backbone, seed=seed),
            bank=dataclasses.replace(self.bank, seed=seed),
            prototype_seed=seed + 1,
            seed=seed,
        )
        return cfg

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(margin=t.margin, lam=t.lam, lr=t.lr, epochs=t.epochs,
                           batch_size=t.batch_size, seed=self.seed,
                           same_class_negatives=t.same_class_negatives)

    def warmup_config(self) -> WarmupConfig:
        w = self.warmup
        return WarmupConfig(epochs=w.epochs, lr=w.lr, batch_size=w.batch_size, margin=w.margin,
                            seed=self.seed, group_size=w.group_size)

    def pretrain_data_config(self) -> DataConfig | None:
        if self.warmup.corpus is None:
            return None
        fields = {"seed": self.data.seed + 1, "image_size": self.data.image_size,
                  "vocab_size": self.data.vocab_size}
        fields.update(self.warmup.corpus)
        return DataConfig(**fields)

    def prototype_encoder(self) -> PrototypeEncoder:
        return PrototypeEncoder(d=self.backbone.d, image_size=self.data.image_size,
                                channels=self.data.channels, vocab_size=self.data.vocab_size,
                                seed=self.prototype_seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        sections = {"data": DataConfig, "backbone": BackboneConfig, "bank": BankSettings,
                    "warmup": WarmupSettings, "train": TrainSettings, "eval": EvalSettings}
        kwargs: dict[str, Any] = {}
        for key, value in raw.items():
            if key in sections:
                try:
                    kwargs[key] = sections[key](**value)
                except TypeError as exc:
                    raise ConfigError(f"section {key!r}: {exc}") from exc
            elif key in ("prototype_seed", "seed", "out"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: "str | Path") -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)


# -- stages ----------------------------------------------------------------

def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(stage, f"missing input {path}; run the earlier stages first")
    return path


def stage_generate(cfg: RunConfig, out: Path) -> SynthDataset:
    try:
        dataset = build_dataset(cfg.data)
        save_dataset(dataset, out / DATA_DIR)
        pre_cfg = cfg.pretrain_data_config()
        if pre_cfg is not None:
            save_dataset(build_dataset(pre_cfg), out / PRETRAIN_DIR)
    except (ValueError, OSError) as exc:
        raise StageError("generate", str(exc)) from exc
    return dataset


def stage_warmup(cfg: RunConfig, out: Path) -> tuple[Backbone, list[float]]:
    corpora = []
    try:
        if cfg.warmup.corpus is not None:
            corpora.append(load_dataset(_require(out / PRETRAIN_DIR, "warmup")))
        if cfg.warmup.use_target_train:
            corpora.append(load_dataset(_require(out / DATA_DIR, "warmup")))
        if not corpora:
            raise StageError("warmup", "no warmup corpus configured")
        backbone, losses = warmup_backbone(corpora, cfg.backbone, cfg.warmup_config())
        save_backbone(backbone, out / BACKBONE_FILE)
    except StageError:
        raise
    except (ValueError, RuntimeError, OSError) as exc:
        raise StageError("warmup", str(exc)) from exc
    return backbone, losses


def init_bank(cfg: RunConfig, dataset: SynthDataset, enc: PrototypeEncoder) -> PromptBank:
    b = cfg.bank
    styles = [StyleTag.parse(s) for s in (b.init_styles or [s.value for s in dataset.styles])]
    protos = style_prototypes({s: dataset.samples(s, "train") for s in styles if s in dataset.styles},
                              enc, per_style=b.per_style)
    return new_bank(b.N, b.n, cfg.backbone.layers, cfg.backbone.d, b.insertion_mode, seed=b.seed,
                    init_prototypes=protos, tokens_per_entry=b.tokens_per_entry)


def stage_tune(cfg: RunConfig, out: Path):
    try:
        dataset = load_dataset(_require(out / DATA_DIR, "tune"))
        backbone = load_backbone(_require(out / BACKBONE_FILE, "tune"))
        enc = cfg.prototype_encoder()
        bank = init_bank(cfg, dataset, enc)
        report = fit(dataset, bank, backbone, cfg.train_config(), enc, cfg.train.tasks,
                     log_path=out / TRAIN_LOG)
        save_bank(bank, out / BANK_FILE)
    except (ValueError, RuntimeError, OSError) as exc:
        raise StageError("tune", str(exc)) from exc
    if not report.backbone_unchanged:
        raise StageError("tune", "backbone parameters changed during prompt tuning")
    return bank, report


def stage_index(cfg: RunConfig, out: Path) -> RetrievalIndex:
    try:
        dataset = load_dataset(_require(out / DATA_DIR, "index"))
        backbone = load_backbone(_require(out / BACKBONE_FILE, "index"))
        bank = load_bank(_require(out / BANK_FILE, "index"))
        index = build_index(dataset, backbone, bank, cfg.prototype_encoder(), styles=_target_styles(cfg))
        save_index(index, out / INDEX_FILE)
    except StageError:
        raise
    except (ValueError, RuntimeError, OSError) as exc:
        raise StageError("index", str(exc)) from exc
    return index


def _target_styles(cfg: RunConfig) -> list[StyleTag]:
    return list(dict.fromkeys(parse_task(t)[1] for t in cfg.eval.tasks))


def _task_name(spec) -> str:
    q, t = parse_task(spec)
    return f"{q.value}->{t.value}"


def _score_queries(index: RetrievalIndex, queries: np.ndarray, samples, target: StyleTag,
                   ks: Sequence[int]) -> dict:
    kmax = min(max(ks), len(index))
    results = rank_many(index, queries, kmax)
    truth = [record_id(target, s.class_id, s.instance_id) for s in samples]
    out = {f"r_at_{k}": recall_at_k(results, truth, min(k, len(index))) for k in ks}
    out["num_queries"] = len(samples)
    return out


def evaluate_models(cfg: RunConfig, dataset: SynthDataset, backbone: Backbone,
                    bank: PromptBank | None, index: RetrievalIndex) -> dict:
    """R@k for every configured task and fusion set on the evaluation split."""
    enc = cfg.prototype_encoder()
    index.check_provenance(backbone, bank)
    split = cfg.eval.split
    tasks, selections = {}, {}
    cache: dict[StyleTag, tuple[list, np.ndarray]] = {}

    def queries_for(style: StyleTag):
        if style not in cache:
            samples = dataset.samples(style, split)
            cache[style] = (samples, embed_samples(samples, backbone, bank, enc))
        return cache[style]

    for spec in cfg.eval.tasks:
        q, t = parse_task(spec)
        if q not in dataset.styles:
            continue
        samples, emb = queries_for(q)
        sub = index.restrict([t])
        tasks[_task_name(spec)] = {**_score_queries(sub, emb, samples, t, cfg.eval.ks), "latency_ms": None}
        if bank is not None:
            ids, _ = bank.select(batch_prototypes(samples, enc))
            counts = np.bincount(ids.ravel(), minlength=bank.N)
            selections[q.value] = {"distinct_entries": int(np.count_nonzero(counts)),
                                   "min_distinct_per_query": int(min(len(set(r)) for r in ids.tolist())),
                                   "entry_counts": counts.tolist()}

    fusion = {}
    natural = index.restrict([StyleTag.NATURAL])
    for group in cfg.eval.fusion:
        styles = [StyleTag.parse(s) for s in group]
        if not all(s in dataset.styles for s in styles) or len(natural) == 0:
            continue
        parts = [queries_for(s) for s in styles]
        samples = parts[0][0]
        fused = np.stack([fuse_queries([p[1][r] for p in parts]) for r in range(len(samples))])
        name = "+".join(s.value for s in styles) + "->natural"
        fusion[name] = {**_score_queries(natural, fused.astype(np.float32), samples,
                                         StyleTag.NATURAL, cfg.eval.ks), "latency_ms": None}
    return {"tasks": tasks, "fusion": fusion, "selection": selections}


def stage_evaluate(cfg: RunConfig, out: Path, tune_report=None) -> dict:
    stage = "evaluate"
    try:
        dataset = load_dataset(_require(out / DATA_DIR, stage))
        backbone = load_backbone(_require(out / BACKBONE_FILE, stage))
        bank = load_bank(_require(out / BANK_FILE, stage))
        index = load_index(_require(out / INDEX_FILE, stage))
        enc = cfg.prototype_encoder()
        prompted = evaluate_models(cfg, dataset, backbone, bank, index)
        base_index = build_index(dataset, backbone, None, None, styles=_target_styles(cfg))
        baseline = evaluate_models(cfg, dataset, backbone, None, base_index)
        if cfg.eval.measure_latency:
            for spec, row in prompted["tasks"].items():
                q, t = parse_task(spec)
                stats = measure_latency(index.restrict([t]), dataset.samples(q, cfg.eval.split),
                                        backbone, bank, enc, cfg.eval.latency_repetitions)
                row["latency_ms"] = stats["embed"]["mean_ms"] + stats["rank"]["mean_ms"]
    except StageError:
        raise
    except (ValueError, RuntimeError, OSError) as exc:
        raise StageError(stage, str(exc)) from exc

    hash_now = backbone.content_hash()
    trainable = bank.num_trainable()
    total = trainable + backbone.num_parameters()
    results = {
        "tasks": prompted["tasks"],
        "fusion": prompted["fusion"],
        "baseline": {"tasks": baseline["tasks"], "fusion": baseline["fusion"]},
        "selection": prompted["selection"],
        "eval_split": cfg.eval.split,
        "chance_r_at_1": 1.0 / max(1, len(index.restrict([StyleTag.NATURAL]))),
        "provenance": {
            "manifest_hash": dataset.manifest.content_hash().hex(),
            "backbone_hash": hash_now,
            "bank_hash": bank.content_hash(),
            "index_hash": index.content_hash(),
        },
        "backbone_check": {
            "hash_before_tuning": tune_report.backbone_hash_before if tune_report else hash_now,
            "hash_after_tuning": tune_report.backbone_hash_after if tune_report else hash_now,
            "unchanged": bool(tune_report.backbone_unchanged) if tune_report else True,
        },
        "parameters": {"trainable": trainable, "total": total, "fraction": trainable / total},
        "config": _config_record(cfg),
    }
    (out / RESULTS_FILE).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    return results


def _config_record(cfg: RunConfig) -> dict:
    record = cfg.to_dict()
    record.pop("out")
    return record


STAGES = ("generate", "warmup", "tune", "index", "evaluate")


def run_pipeline(cfg: RunConfig, out: "str | Path | None" = None,
                 reuse: Sequence[str] = ()) -> dict:
    """Run every stage in order; stages listed in ``reuse`` are skipped and
    their on-disk outputs used instead. Returns the results dict, with stage
    timings under ``"timings"`` (not written to the results file)."""
    cfg.validate()
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    timings = {}
    report = None
    for stage in STAGES:
        t0 = time.perf_counter()
        if stage in reuse:
            continue
        if stage == "generate":
            stage_generate(cfg, out)
        elif stage == "warmup":
            _, losses = stage_warmup(cfg, out)
            (out / "warmup_losses.json").write_text(json.dumps(losses) + "\n", encoding="utf-8")
        elif stage == "tune":
            _, report = stage_tune(cfg, out)
        elif stage == "index":
            stage_index(cfg, out)
        else:
            results = stage_evaluate(cfg, out, report)
        timings[stage] = time.perf_counter() - t0
        log.info("stage %s done in %.1fs", stage, timings[stage])
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n", encoding="utf-8")
    return {**results, "timings": timings}


# -- ablation --------------------------------------------------------------

AXES = {"insertion_mode": ("deep", "shallow"), "n": (1, 2, 4, 8), "N": (10, 20, 40)}


def ablate(cfg: RunConfig, axis: str, values: Sequence | None = None,
           out: "str | Path | None" = None) -> dict:
    """One tune/index/evaluate run per axis value over a shared corpus and backbone."""
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    values = list(values if values is not None else AXES[axis])
    cfg.validate()
    out = Path(out or cfg.out)
    shared = out / "shared"
    shared.mkdir(parents=True, exist_ok=True)
    if not (shared / BACKBONE_FILE).exists():
        stage_generate(cfg, shared)
        stage_warmup(cfg, shared)

    rows = []
    for value in values:
        bank = dataclasses.replace(cfg.bank, **{axis: value})
        if axis == "n":
            bank.N = max(bank.N, value)
        run_cfg = dataclasses.replace(cfg, bank=bank)
        run_cfg.validate()
        run_dir = out / f"{axis}={value}"
        run_dir.mkdir(parents=True, exist_ok=True)
        for name in (DATA_DIR, BACKBONE_FILE):
            link = run_dir / name
            if not link.exists():
                link.symlink_to((shared / name).resolve())
        _, report = stage_tune(run_cfg, run_dir)
        stage_index(run_cfg, run_dir)
        res = stage_evaluate(run_cfg, run_dir, report)
        for task, metrics in res["tasks"].items():
            rows.append({"axis": axis, "value": value, "task": task,
                         "manifest_hash": res["provenance"]["manifest_hash"],
                         **{k: v for k, v in metrics.items() if k.startswith("r_at_")}})
    table = {"axis": axis, "values": values, "rows": rows, "findings": _findings(axis, rows)}
    (out / f"ablation_{axis}.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
    (out / f"ablation_{axis}.md").write_text(format_table(table), encoding="utf-8")
    for line in table["findings"]:
        log.info("ablation %s: %s", axis, line)
    return table


def _mean_r1(rows: list[dict], value) -> float:
    vals = [r["r_at_1"] for r in rows if r["value"] == value]
    return float(np.mean(vals)) if vals else float("nan")


def _findings(axis: str, rows: list[dict]) -> list[str]:
    if axis != "insertion_mode":
        return []
    deep, shallow = _mean_r1(rows, "deep"), _mean_r1(rows, "shallow")
    if deep >= shallow:
        return [f"deep >= shallow at mean R@1 ({deep:.3f} vs {shallow:.3f}): expected direction"]
    return [f"DIVERGENCE: shallow > deep at mean R@1 ({shallow:.3f} vs {deep:.3f})"]


def format_table(table: dict) -> str:
    ks = sorted({k for r in table["rows"] for k in r if k.startswith("r_at_")},
                key=lambda k: int(k.rsplit("_", 1)[1]))
    head = [table["axis"], "task", *ks]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in table["rows"]:
        lines.append("| " + " | ".join([str(r["value"]), r["task"], *(f"{r[k]:.3f}" for k in ks)]) + " |")
    lines.extend(f"\n{f}" for f in table["findings"])
    return "\n".join(lines) + "\n"
