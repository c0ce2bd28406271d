"""Experiment orchestration: transform, per-view training, prediction, fusion, evaluation."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np

from . import bsif, cnn, fusion, metrics, selection, svm
from .common import atomic_write_bytes, atomic_write_text
from .imaging import (TEST_PARTITIONS, Dataset, SampleRecord, combine, crop_array, decode_image,
                      load_manifest, split_validation)

log = logging.getLogger("mvpad")

FUSION_METHODS = ("rf", "mv", "bwwva", "bwwvi", "meta")
WORKERS_ENV = "MVPAD_WORKERS"
BEST_VIEW = "best_view"

_NUM_LIST = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["manifests", "out"],
    "properties": {
        "manifests": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "name": {"type": ["string", "null"]},
        "out": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "banks": {"type": ["string", "null"]},
        "views": {"type": ["array", "null"], "items": {"type": "string"}, "minItems": 1},
        "input_size": {"type": "integer", "minimum": 1},
        "border": {"enum": list(bsif.BORDER_MODES)},
        "encoding": {"enum": ["scalar", "planes"]},
        "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 2},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "patience": {"type": "integer", "minimum": 1},
                "recalibrate_bn": {"type": "boolean"},
            },
        },
        "fusion": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "methods": {"type": "array", "items": {"enum": list(FUSION_METHODS)}},
                "trees": {"type": "integer", "minimum": 1},
                "fit_partition": {"enum": ["train", "validation"]},
                "forest_inputs": {"enum": ["decisions", "scores"]},
                "bwwvi_importance": {"enum": ["mdi", "permutation"]},
            },
        },
        "selection": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "k": {"type": ["integer", "null"], "minimum": 1},
                "k_range": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 1},
                            "minItems": 1},
                "l": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["rows", "columns"]},
                "union": {"type": "boolean"},
                "c_grid": _NUM_LIST,
                "gamma_grid": _NUM_LIST,
                "folds": {"type": "integer", "minimum": 2},
                "trees": {"type": "integer", "minimum": 1},
                "svm_inputs": {"enum": ["scores", "decisions"]},
                "fit_partition": {"enum": ["train", "validation"]},
            },
        },
    },
}

DEFAULTS = {
    "name": None, "seed": 0, "banks": None, "views": None, "input_size": 260, "border": "wrap",
    "encoding": "scalar", "validation_fraction": 0.2,
    "train": {"epochs": 30, "batch_size": 32, "lr": 0.01, "momentum": 0.9, "weight_decay": 1e-4,
              "patience": 10, "recalibrate_bn": True},
    "fusion": {"methods": list(FUSION_METHODS), "trees": 100, "fit_partition": "validation",
               "forest_inputs": "decisions", "bwwvi_importance": "mdi"},
    "selection": {"k": 16, "k_range": None, "l": 5, "mode": "rows", "union": True,
                  "c_grid": list(selection.DEFAULT_C_GRID),
                  "gamma_grid": list(selection.DEFAULT_GAMMA_GRID), "folds": 5, "trees": 100,
                  "svm_inputs": "scores", "fit_partition": "validation"},
}


class ExperimentError(RuntimeError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    manifests: list[str]
    out: str
    name: str | None = None
    seed: int = 0
    banks: str | None = None
    views: list[str] | None = None
    input_size: int = 260
    border: str = "wrap"
    encoding: str = "scalar"
    validation_fraction: float = 0.2
    train: dict = field(default_factory=lambda: dict(DEFAULTS["train"]))
    fusion: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["fusion"]))
    selection: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["selection"]))

    @classmethod
    def from_dict(cls, data: dict, check_paths: bool = True) -> "ExperimentConfig":
        try:
            jsonschema.validate(data, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ExperimentError(f"invalid config at {where}: {exc.message}") from None
        cfg = cls(**_merge(DEFAULTS, data))
        cfg.validate(check_paths)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def view_ids(self) -> list[bsif.ViewId]:
        if self.views is None:
            return bsif.enumerate_views()
        return [bsif.ViewId.parse(v) for v in self.views]

    def validate(self, check_paths: bool = True) -> None:
        try:
            views = self.view_ids
        except ValueError as exc:
            raise ExperimentError(str(exc)) from None
        names = [v.name for v in views]
        if len(set(names)) != len(names):
            raise ExperimentError("views must be unique")
        unknown = [n for n in names if n not in bsif._VIEW_INDEX]
        if unknown:
            raise ExperimentError(f"views outside the universe: {', '.join(unknown)}")
        sel = self.selection
        p = len(views)
        ks = sel["k_range"] if sel["k_range"] else [sel["k"]] if sel["k"] else []
        if "meta" in self.fusion["methods"]:
            if not ks:
                raise ExperimentError("selection needs k or k_range")
            if p < 2 or max(ks) > p:
                raise ExperimentError(f"k must lie within 1..{p}")
            if sel["l"] > p - 1:
                raise ExperimentError(f"l must lie within 1..{p - 1}")
        if check_paths:
            for m in self.manifests:
                if not Path(m).is_file():
                    raise ExperimentError(f"manifest not found: {m}")
            if self.banks is not None and not Path(self.banks).is_dir():
                raise ExperimentError(f"filter-bank directory not found: {self.banks}")

    def train_config(self, view: bsif.ViewId) -> cnn.TrainConfig:
        return cnn.TrainConfig(seed=self.seed + bsif.view_index(view), input_size=self.input_size,
                               **self.train)


def load_config(path: str | Path | None, overrides: dict | None = None,
                check_paths: bool = True) -> ExperimentConfig:
    data = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    return ExperimentConfig.from_dict(_merge(data, overrides or {}), check_paths)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ExperimentError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    """Ordered map, optionally over a process pool; results come back in input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, a, allow_pickle=False)
    return buf.getvalue()


class Experiment:
    """One configured run; every stage reads and writes under ``cfg.out``."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.views = cfg.view_ids
        self._dataset: Dataset | None = None
        self._banks: dict[str, bsif.FilterBank] | None = None

    # -- shared state -------------------------------------------------------------------

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            sets = [load_manifest(m) for m in self.cfg.manifests]
            ds = sets[0] if len(sets) == 1 else combine(sets)
            if self.cfg.name:
                ds = Dataset(self.cfg.name, ds.records, ds.root)
            if not ds.partition("validation"):
                ds = split_validation(ds, self.cfg.validation_fraction, self.cfg.seed)
            self._dataset = ds
        return self._dataset

    @property
    def banks(self) -> dict[str, bsif.FilterBank]:
        if self._banks is None:
            self._banks = bsif.load_banks(self.cfg.banks, self.views)
        return self._banks

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def labels(self, records: Sequence[SampleRecord], stage: str) -> np.ndarray:
        return self.dataset.labels(records, stage)

    def _flush_audit(self, stage: str) -> None:
        entries = [e for e in self.dataset.audit.entries if e[0] == stage]
        self.dataset.audit.entries[:] = [e for e in self.dataset.audit.entries if e[0] != stage]
        if not entries:
            return
        path = self.path("audit.jsonl")
        old = path.read_text(encoding="utf-8") if path.exists() else ""
        lines = [json.dumps({"stage": s, "partition": p, "count": c}) for s, p, c in entries]
        atomic_write_text(path, old + "\n".join(lines) + "\n")

    def write_artifacts(self) -> None:
        """Record every produced file (cache entries only by count) in artifacts.json."""
        files, cached = {}, 0
        for p in sorted(self.out.rglob("*")):
            if not p.is_file() or p.name.startswith("."):
                continue
            rel = p.relative_to(self.out).as_posix()
            if rel == "artifacts.json":
                continue
            if rel.startswith("cache/"):
                cached += 1
                continue
            files[rel] = _sha256(p.read_bytes())
        atomic_write_text(self.path("artifacts.json"),
                          json.dumps({"files": files, "cached_maps": cached}, indent=2) + "\n")

    def _finish(self, stage: str) -> None:
        self._flush_audit(stage)
        self.write_artifacts()

    # -- transform ----------------------------------------------------------------------

    def transform(self) -> dict:
        """Cache every view's input map per sample; returns counts and per-sample errors."""
        self.out.mkdir(parents=True, exist_ok=True)
        cfg = self.cfg
        bank_hash = {name: _sha256(bsif.bank_to_bytes(b)) for name, b in self.banks.items()}
        index, errors, hits, made = {}, [], 0, 0
        cache = self.path("cache")
        cache.mkdir(parents=True, exist_ok=True)
        for rec in self.dataset.records:
            try:
                raw = self.dataset.resolve(rec).read_bytes()
                img = decode_image(raw)
                center = rec.center_for(img)
                if cfg.input_size > min(img.width, img.height):
                    raise ValueError(f"image smaller than crop ({img.width}x{img.height} < {cfg.input_size})")
            except Exception as exc:  # noqa: BLE001 - reported per sample
                errors.append({"id": rec.id, "error": f"{type(exc).__name__}: {exc}"})
                continue
            img_hash = _sha256(raw)
            entry, todo = {}, []
            for view in self.views:
                key = _sha256("|".join([img_hash, view.name, bank_hash.get(view.name, ""),
                                        str(cfg.input_size), repr(center), cfg.border]).encode())
                entry[view.name] = key
                if (cache / f"{key}.npy").exists():
                    hits += 1
                else:
                    todo.append(view)
            coded = [v for v in todo if v.kind != "raw"]
            codes = bsif.bsif_transform_many(img, [self.banks[v.name] for v in coded], cfg.border)
            maps = dict(zip((v.name for v in coded), (c.codes for c in codes)))
            for view in todo:
                if view.kind == "raw":
                    arr = crop_array(img.pixels, center, cfg.input_size).astype(np.float32)
                else:
                    arr = crop_array(maps[view.name], center, cfg.input_size)
                target = cache / f"{entry[view.name]}.npy"
                atomic_write_bytes(target, _npy_bytes(np.ascontiguousarray(arr)))
                made += 1
            index[rec.id] = entry
        atomic_write_text(self.path("transform", "index.json"), json.dumps(index, indent=1, sort_keys=True))
        atomic_write_text(self.path("transform", "errors.json"), json.dumps(errors, indent=2))
        log.info("transform: %d maps computed, %d cache hits, %d failed samples", made, hits, len(errors))
        self._finish("transform")
        return {"computed": made, "cache_hits": hits, "errors": errors}

    def _index(self) -> dict:
        path = self.path("transform", "index.json")
        if not path.exists():
            raise ExperimentError("no transform index; run the transform stage first")
        return json.loads(path.read_text(encoding="utf-8"))

    def inputs(self, view: bsif.ViewId, records: Sequence[SampleRecord], index: dict | None = None) -> np.ndarray:
        """CNN input tensor (N, C, H, W) float32 for one view."""
        index = index or self._index()
        missing = [r.id for r in records if r.id not in index]
        if missing:
            raise ExperimentError(f"samples without cached maps: {', '.join(missing[:5])}")
        maps = np.stack([np.load(self.path("cache", f"{index[r.id][view.name]}.npy")) for r in records])
        if view.kind == "raw":
            return maps[:, None].astype(np.float32)
        if self.cfg.encoding == "planes":
            return np.stack([(maps >> k) & 1 for k in range(view.n)], axis=1).astype(np.float32)
        return (maps / float(2 ** view.n - 1)).astype(np.float32)[:, None]

    # -- training -----------------------------------------------------------------------

    def model_path(self, view: bsif.ViewId) -> Path:
        return self.path("models", f"{view.name}.mvpc")

    def train(self, views: Sequence[bsif.ViewId] | None = None) -> list[dict]:
        """Train every view lacking a checkpoint; write the per-view validation summary."""
        views = list(views or self.views)
        train = self.dataset.partition("train")
        val = self.dataset.partition("validation")
        # labels are read here, under audit, and shipped to the workers
        ytr, yva = self.labels(train, "train"), self.labels(val, "train")
        todo = [v for v in views if not self.model_path(v).exists()]
        log.info("train: %d of %d views need training", len(todo), len(views))
        jobs = [(self.cfg.to_dict(), v.name, ytr, yva) for v in todo]
        for name, epochs in _map(_train_job, jobs, worker_count()):
            log.info("train: %s done after %d epochs", name, epochs)
        rows = []
        for v in views:
            logs = self.path("logs", f"{v.name}.csv")
            with open(logs, newline="", encoding="utf-8") as fh:
                hters = [float(r["val_hter"]) for r in csv.DictReader(fh)]
            rows.append({"view": v.name, "epochs": len(hters), "val_hter": min(hters)})
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["view", "epochs", "val_hter"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "val_hter": repr(r["val_hter"])})
        atomic_write_text(self.path("train_summary.csv"), buf.getvalue())
        self._finish("train")
        return rows

    def _train_one(self, view_name: str, ytr: np.ndarray, yva: np.ndarray) -> tuple[str, int]:
        view = bsif.ViewId.parse(view_name)
        index = self._index()
        xtr = self.inputs(view, self.dataset.partition("train"), index)
        xva = self.inputs(view, self.dataset.partition("validation"), index)
        tc = self.cfg.train_config(view)
        arch = cnn.Architecture(input_size=self.cfg.input_size, in_channels=xtr.shape[1])
        model, history = cnn.train_view(view.name, xtr, ytr, xva, yva, tc, arch)
        cnn.save_log(history, self.path("logs", f"{view.name}.csv"))
        cnn.save_model(model, self.model_path(view))
        return view.name, len(history)

    # -- prediction ---------------------------------------------------------------------

    def predict(self) -> dict[str, fusion.EnsembleMatrix]:
        missing = [v.name for v in self.views if not self.model_path(v).exists()]
        if missing:
            raise ExperimentError(f"missing checkpoints for views: {', '.join(missing)}")
        ds = self.dataset
        index = self._index()
        records = list(ds.records)
        cols = _map(_predict_job, [(self.cfg.to_dict(), v.name) for v in self.views], worker_count()) \
            if worker_count() > 1 else [self._predict_one(v, records, index) for v in self.views]
        scores = np.stack(cols, axis=1)
        out = {}
        for part in ("train", "validation", *TEST_PARTITIONS):
            rows = [i for i, r in enumerate(records) if r.partition == part]
            recs = [records[i] for i in rows]
            labels = None if part in TEST_PARTITIONS else self.labels(recs, "predict")
            m = fusion.EnsembleMatrix(tuple(r.id for r in recs), tuple(v.name for v in self.views),
                                      scores[rows], labels)
            m.save(self.path("ensemble", f"{part}.csv"))
            out[part] = m
        self._finish("predict")
        return out

    def _predict_one(self, view: bsif.ViewId, records, index) -> np.ndarray:
        model = cnn.load_model(self.model_path(view))
        return cnn.predict_proba(model, self.inputs(view, records, index))

    def ensemble(self, partition: str) -> fusion.EnsembleMatrix:
        path = self.path("ensemble", f"{partition}.csv")
        if not path.exists():
            raise ExperimentError(f"no ensemble matrix for {partition}; run the predict stage first")
        return fusion.EnsembleMatrix.load(path)

    # -- fusion -------------------------------------------------------------------------

    def _write_fused(self, method: str, parts: dict[str, tuple[fusion.EnsembleMatrix, np.ndarray, np.ndarray]]):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "partition", "score", "decision"])
        for part, (m, dec, score) in parts.items():
            for sid, d, s in zip(m.sample_ids, dec, score):
                w.writerow([sid, part, repr(float(s)), int(d)])
        atomic_write_text(self.path("fusion", f"{method}.csv"), buf.getvalue())

    def fuse(self, methods: Sequence[str] | None = None) -> dict[str, dict]:
        """Fit the simple fusion rules on the fit partition and apply them to both test sets."""
        fc = self.cfg.fusion
        methods = [m for m in (methods or fc["methods"]) if m != "meta"]
        fit = self.ensemble(fc["fit_partition"])
        tests = {p: self.ensemble(p) for p in TEST_PARTITIONS}
        info: dict[str, dict] = {}
        forest = None
        if {"rf", "bwwvi"} & set(methods):
            forest = fusion.train_forest(fit, fc["trees"], self.cfg.seed,
                                         use_scores=fc["forest_inputs"] == "scores")
            fusion.save_forest(forest, self.path("models", "forest.mvrf"))
            info["rf"] = {"oob_error": forest.oob_error, "importance_mdi": forest.importance("mdi"),
                          "importance_permutation": forest.importance("permutation")}
        for method in methods:
            parts = {}
            if method == "rf":
                for p, m in tests.items():
                    parts[p] = (m, *fusion.predict_forest(forest, m))
            elif method == "mv":
                for p, m in tests.items():
                    parts[p] = (m, fusion.majority_vote(m), m.decisions.mean(axis=1))
            elif method in ("bwwva", "bwwvi"):
                if method == "bwwva":
                    values = (fit.decisions == fit.labels[:, None]).mean(axis=0)
                    weights = fusion.bwwv_weights(values, fit.view_ids, "accuracy")
                else:
                    imp = forest.importance(fc["bwwvi_importance"])
                    weights = fusion.bwwv_weights([imp[v] for v in fit.view_ids], fit.view_ids, "importance")
                info[method] = {"weights": weights.as_dict()}
                for p, m in tests.items():
                    w = np.asarray(weights.weights)
                    total = w.sum()
                    score = m.decisions @ w / total if total > 0 else np.zeros(m.n_samples)
                    parts[p] = (m, fusion.weighted_vote(m, weights), score)
            else:
                raise ExperimentError(f"unknown fusion method {method!r}")
            self._write_fused(method, parts)
        atomic_write_text(self.path("fusion", "fusion_info.json"), json.dumps(info, indent=2, sort_keys=True))
        self._finish("fuse")
        return info

    def select(self) -> selection.SelectionResult:
        """Selection on the validation split, then the meta-SVM, applied to both test sets."""
        sc = self.cfg.selection
        val = self.ensemble("validation")
        seed = self.cfg.seed
        k = sc["k"]
        search = None
        if sc["k_range"]:
            k, search = selection.grid_search_k(
                [val], sc["k_range"], sc["l"], sc["folds"], seed, sc["trees"], sc["mode"], sc["union"],
                sc["c_grid"], sc["gamma_grid"], sc["svm_inputs"] == "scores")
        result = selection.select_views(val, k, sc["l"], seed, sc["trees"], sc["mode"], sc["union"])
        result.save(self.path("selection.json"))
        fit = self.ensemble(sc["fit_partition"]).columns(result.selected)
        model, (C, gamma), table = selection.train_meta_svm(
            fit, sc["c_grid"], sc["gamma_grid"], sc["folds"], seed,
            use_scores=sc["svm_inputs"] == "scores")
        svm.save_svm(model, self.path("models", "meta.mvsv"))
        parts = {}
        for p in TEST_PARTITIONS:
            m = self.ensemble(p)
            dec, margin = selection.predict_meta(model, m)
            parts[p] = (m, dec, margin)
        self._write_fused("meta", parts)
        info = {"k": k, "k_search": search, "C": C, "gamma": gamma,
                "cv_hter": [{"C": c, "gamma": g, "hter": h} for (c, g), h in table.items()]}
        atomic_write_text(self.path("fusion", "meta_info.json"), json.dumps(info, indent=2))
        self._finish("select")
        return result

    # -- evaluation ---------------------------------------------------------------------

    def best_view(self) -> str:
        path = self.path("train_summary.csv")
        if not path.exists():
            raise ExperimentError("no training summary; run the train stage first")
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return min(rows, key=lambda r: float(r["val_hter"]))["view"]

    def evaluate(self) -> list[metrics.EvalReport]:
        """The only stage that reads test labels: per-view and fused reports for both test sets."""
        ds = self.dataset
        name = ds.name
        truth = {}
        for p in TEST_PARTITIONS:
            recs = ds.partition(p)
            truth[p] = dict(zip((r.id for r in recs), self.labels(recs, "evaluate")))
        decisions: dict[str, dict[str, tuple[list[str], np.ndarray]]] = {}
        for p in TEST_PARTITIONS:
            m = self.ensemble(p)
            for j, v in enumerate(m.view_ids):
                decisions.setdefault(v, {})[p] = (list(m.sample_ids), m.decisions[:, j])
        best = self.best_view()
        decisions[BEST_VIEW] = decisions[best]
        for method in FUSION_METHODS:
            path = self.path("fusion", f"{method}.csv")
            if not path.exists():
                continue
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            for p in TEST_PARTITIONS:
                sel = [r for r in rows if r["partition"] == p]
                decisions.setdefault(method, {})[p] = ([r["sample_id"] for r in sel],
                                                       np.array([int(r["decision"]) for r in sel]))
        reports = []
        for method, parts in decisions.items():
            per = {}
            for p in TEST_PARTITIONS:
                ids, dec = parts[p]
                y = np.array([truth[p][i] for i in ids], dtype=np.int8)
                per[p] = metrics.evaluate(dec, y, p, ids, name, method)
            reports += [per["test_known"], per["test_unknown"],
                        metrics.overall_report(per["test_known"], per["test_unknown"])]
        metrics.write_reports(self.path("reports.csv"), reports)
        atomic_write_text(self.path("best_view.txt"), best + "\n")
        self._finish("evaluate")
        return reports

    def run(self) -> list[metrics.EvalReport]:
        t = self.transform()
        if t["errors"]:
            raise ExperimentError(f"{len(t['errors'])} samples failed to transform")
        self.train()
        self.predict()
        self.fuse()
        if "meta" in self.cfg.fusion["methods"]:
            self.select()
        reports = self.evaluate()
        write_report([self.out], self.out)
        return reports


def _train_job(job) -> tuple[str, int]:
    cfg, view, ytr, yva = job
    return Experiment(ExperimentConfig.from_dict(cfg))._train_one(view, ytr, yva)


def _predict_job(job) -> np.ndarray:
    cfg, view = job
    exp = Experiment(ExperimentConfig.from_dict(cfg))
    return exp._predict_one(bsif.ViewId.parse(view), list(exp.dataset.records), exp._index())


# -- report tables --------------------------------------------------------------------------

REPORT_METHOD_ORDER = (BEST_VIEW, "mv", "bwwva", "bwwvi", "rf", "meta")


def write_report(results: Sequence[str | Path], out: str | Path, baseline: str = BEST_VIEW,
                 methods: Sequence[str] | None = None) -> str:
    """Markdown + CSV comparison tables with HTER error reduction against ``baseline``."""
    rows = []
    for d in results:
        path = Path(d) / "reports.csv"
        if path.exists():
            rows += metrics.read_report_rows(path)
    if not rows:
        raise ExperimentError("no reports found in " + ", ".join(map(str, results)))
    present = {str(r["method"]) for r in rows}
    if methods is None:
        methods = [m for m in REPORT_METHOD_ORDER if m in present]
    index = {(r["dataset"], r["partition"], r["method"]): r for r in rows}
    order = {"test_known": 0, "test_unknown": 1, "overall": 2}
    keys = sorted({(r["dataset"], r["partition"]) for r in rows}, key=lambda k: (k[0], order.get(k[1], 9)))

    red_rows = []
    for ds, part in keys:
        base = index.get((ds, part, baseline))
        for m in methods:
            r = index.get((ds, part, m))
            if r is None:
                continue
            red = None
            if base is not None and base["hter"] is not None and r["hter"] is not None and base["hter"] != 0:
                red = metrics.error_reduction(Fraction(base["hter"]), Fraction(r["hter"]))
            red_rows.append({"dataset": ds, "partition": part, "method": m,
                             "apcer": _dec(r["apcer"]), "bpcer": _dec(r["bpcer"]),
                             "hter": _dec(r["hter"]), "error_reduction": metrics.fmt(red)})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["dataset", "partition", "method", "apcer", "bpcer", "hter",
                                        "error_reduction"], lineterminator="\n")
    w.writeheader()
    w.writerows(red_rows)
    out = Path(out)
    atomic_write_text(out / "report.csv", buf.getvalue())

    lines = ["# HTER comparison", "", metrics.format_table(rows, methods), f"## Error reduction vs {baseline} (%)", ""]
    head = ["Dataset", "Set", *methods]
    lines += ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for ds, part in keys:
        cells = [ds, metrics.PARTITION_SHORT.get(part, part)]
        for m in methods:
            hit = [r for r in red_rows if (r["dataset"], r["partition"], r["method"]) == (ds, part, m)]
            cells.append(hit[0]["error_reduction"] if hit else metrics.NA)
        lines.append("| " + " | ".join(cells) + " |")
    text = "\n".join(lines) + "\n"
    atomic_write_text(out / "report.md", text)
    return text


def _dec(v: Decimal | None) -> str:
    return metrics.NA if v is None else f"{v:.2f}"
