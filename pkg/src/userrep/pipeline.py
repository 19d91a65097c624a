"""Content-hashed stage graph driving the whole pipeline from one JSON config.

Every stage writes into a fresh temporary directory that is renamed into
place only after all outputs exist, together with ``stage.json``: the config
snapshot, derived seed, sha256 of each input and output, and wall time.  A
stage is up to date when its snapshot and input hashes match the current
config and files; it refuses to run when an upstream output no longer
matches the hash its producer recorded, or was produced under a different
config.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
import time
from contextlib import contextmanager
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import autodiff as ad
from .checkpoint import file_sha256
from .ingest import TOKENIZERS, to_epoch
from .interest_vocab import BoIEncoder, InterestVocabulary, VocabConfig, coarse_map, fit_vocabulary
from .item_embed import ItemEmbedConfig, ItemEncoder, PairCorpus, train_item_encoder
from .probe import ProbeConfig, read_labels, run_probe, write_metrics
from .smen import SmenConfig, SmenParams, UserSequences, represent, train_smen
from .synth import TASKS, SynthConfig, generate
from .workflow import boi_features, build_store, load_users, period_range, read_boi_records, write_boi_records

log = logging.getLogger(__name__)

STAGES = ("synth", "train-items", "fit-vocab", "encode-boi", "train-smen", "infer", "probe")


class ConfigError(Exception):
    exit_code = 1


class DataError(Exception):
    exit_code = 2


class StaleArtifact(Exception):
    exit_code = 3


# --- config ----------------------------------------------------------------

def _block(cls, drop=("seed",), **extra) -> dict:
    out = {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in drop}
    out.update(extra)
    return json.loads(json.dumps(out))


DEFAULTS: dict[str, Any] = {
    "artifact_dir": "artifacts",
    "seed": 0,
    "precision": "float64",
    "deterministic": True,
    "threads": 1,
    "data": {"events": None, "labels": {}, "window_start": None, "window_end": None,
             "tokenizer": "simple", "truncate": None},
    "synth": _block(SynthConfig),
    "items": _block(ItemEmbedConfig),
    "vocab": _block(VocabConfig),
    "boi": {"scales": ["month", "year"]},
    "smen": _block(SmenConfig, drop=("seed", "D", "scales")),
    "infer": {"history": [None, 2], "batch_size": 512},
    "probe": _block(ProbeConfig, repeats=1, features=["smen", "boi"]),
    "sweep": {"param": None, "values": []},
}

# config block read by each stage (besides the global seed and precision)
STAGE_BLOCKS = {
    "synth": ("synth",),
    "train-items": ("data", "items"),
    "fit-vocab": ("vocab",),
    "encode-boi": ("data", "boi"),
    "train-smen": ("smen",),
    "infer": ("infer",),
    "probe": ("probe",),
}


def _merge_strict(base: dict, override: Mapping, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and key not in ("labels",):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = _merge_strict(base[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: Mapping | None = None) -> dict:
    """Defaults, then the JSON file, then dotted ``overrides``; unknown keys are errors."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, Mapping):
            raise ConfigError("config root must be an object")
        cfg = _merge_strict(cfg, user)
    for dotted, value in (overrides or {}).items():
        cfg = set_param(cfg, dotted, value)
    validate_config(cfg)
    return cfg


def set_param(cfg: dict, dotted: str, value) -> dict:
    keys = dotted.split(".")
    patch: Any = value
    for k in reversed(keys):
        patch = {k: patch}
    return _merge_strict(cfg, patch)


def get_param(cfg: Mapping, dotted: str):
    node: Any = cfg
    for k in dotted.split("."):
        if not isinstance(node, Mapping) or k not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    return node


def validate_config(cfg: Mapping) -> None:
    if cfg["precision"] not in ("float32", "float64"):
        raise ConfigError(f"precision must be float32 or float64, got {cfg['precision']!r}")
    if cfg["data"]["tokenizer"] not in TOKENIZERS:
        raise ConfigError(f"unknown tokenizer {cfg['data']['tokenizer']!r}")
    if cfg["data"]["events"] is not None:
        if not (cfg["data"]["window_start"] and cfg["data"]["window_end"]):
            raise ConfigError("data.window_start and data.window_end are required with data.events")
        if not cfg["data"]["labels"]:
            raise ConfigError("data.labels must map task names to label files")
    scales = cfg["boi"]["scales"]
    if not 1 <= len(scales) <= 2:
        raise ConfigError(f"boi.scales must list one or two granularities, got {scales}")
    try:
        SynthConfig(**_tuples(cfg["synth"]), seed=0).validate()
        ItemEmbedConfig(**cfg["items"])
        VocabConfig(**cfg["vocab"])
        SmenConfig(D=cfg["vocab"]["D"], scales=tuple(scales), **cfg["smen"])
        ProbeConfig(**{k: v for k, v in cfg["probe"].items() if k not in ("repeats", "features")})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cfg["probe"]["features"]) - {"smen", "boi"}
    if unknown:
        raise ConfigError(f"unknown probe features {sorted(unknown)}")


def _tuples(block: Mapping) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in block.items()}


def derived_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# --- stage bookkeeping -----------------------------------------------------

@contextmanager
def numerics(cfg: Mapping, threads: int | None = None):
    """Precision and BLAS threading for the duration of a run."""
    from threadpoolctl import threadpool_limits

    n = 1 if cfg["deterministic"] else (threads or cfg["threads"])
    previous = ad.default_dtype()
    ad.set_default_dtype(np.float32 if cfg["precision"] == "float32" else np.float64)
    try:
        with threadpool_limits(limits=n):
            yield
    finally:
        ad.set_default_dtype(previous)


def _atomic_json(path: Path, obj) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


class Pipeline:
    """Stage runner over one artifact directory.

    ``sweep`` optionally names a ``(param, value)`` pair; stages whose config
    depends on the swept parameter, and everything downstream of them, live
    under ``sweeps/<param>=<value>/`` while upstream stages are shared.
    """

    def __init__(self, cfg: Mapping, root=None, sweep: tuple[str, Any] | None = None):
        self.cfg = cfg
        self.root = Path(root if root is not None else cfg["artifact_dir"])
        self.sweep = sweep
        self._first_swept = None
        if sweep is not None:
            block = sweep[0].split(".")[0]
            hits = [s for s in STAGES if block in STAGE_BLOCKS[s]]
            if not hits:
                raise ConfigError(f"sweep parameter {sweep[0]!r} is not read by any stage")
            self._first_swept = STAGES.index(hits[0])

    # paths
    def stage_dir(self, stage: str) -> Path:
        if self._first_swept is not None and STAGES.index(stage) >= self._first_swept:
            value = json.dumps(self.sweep[1], separators=(",", ":"), sort_keys=True)
            return self.root / "sweeps" / f"{self.sweep[0]}={value}" / stage
        return self.root / stage

    @property
    def external_data(self) -> bool:
        return self.cfg["data"]["events"] is not None

    def window(self) -> tuple[int, int]:
        d = self.cfg["data"]
        if self.external_data:
            return to_epoch(d["window_start"]), to_epoch(d["window_end"])
        return SynthConfig(**_tuples(self.cfg["synth"])).window

    def events_path(self) -> tuple[Path, str | None]:
        if self.external_data:
            return Path(self.cfg["data"]["events"]), None
        return self.stage_dir("synth") / "events.jsonl", "synth"

    def label_paths(self) -> dict[str, tuple[Path, str | None]]:
        if self.external_data:
            return {t: (Path(p), None) for t, p in sorted(self.cfg["data"]["labels"].items())}
        return {t: (self.stage_dir("synth") / f"labels_{t}.csv", "synth") for t in TASKS}

    def inputs(self, stage: str) -> dict[str, tuple[Path, str | None]]:
        """Input name -> (path, producing stage or None for external files)."""
        ev = {"events": self.events_path()}
        d = self.stage_dir
        table = {
            "synth": {},
            "train-items": ev,
            "fit-vocab": {**ev, "encoder": (d("train-items") / "encoder.ckpt", "train-items")},
            "encode-boi": {**ev, "encoder": (d("train-items") / "encoder.ckpt", "train-items"),
                           "vocab": (d("fit-vocab") / "vocab.ckpt", "fit-vocab")},
            "train-smen": {"boi": (d("encode-boi") / "boi.jsonl", "encode-boi"),
                           "boi_meta": (d("encode-boi") / "boi_meta.json", "encode-boi")},
            "infer": {"boi": (d("encode-boi") / "boi.jsonl", "encode-boi"),
                      "boi_meta": (d("encode-boi") / "boi_meta.json", "encode-boi"),
                      "smen": (d("train-smen") / "smen.ckpt", "train-smen")},
            "probe": {"boi": (d("encode-boi") / "boi.jsonl", "encode-boi"),
                      "boi_meta": (d("encode-boi") / "boi_meta.json", "encode-boi"),
                      **{f"repr_{_history_tag(h)}": (d("infer") / f"repr_{_history_tag(h)}.jsonl", "infer")
                         for h in self.cfg["infer"]["history"]},
                      **{f"labels_{t}": v for t, v in self.label_paths().items()}},
        }
        if self.external_data and stage == "synth":
            raise ConfigError("the synth stage is disabled when data.events is set")
        return table[stage]

    def snapshot(self, stage: str) -> dict:
        snap = {"stage": stage, "seed": derived_seed(self.cfg["seed"], stage),
                "precision": self.cfg["precision"]}
        for block in STAGE_BLOCKS[stage]:
            snap[block] = self.cfg[block]
        if stage in ("encode-boi", "train-smen", "infer", "probe"):
            snap["window"] = list(self.window())
        return json.loads(json.dumps(snap))

    def read_manifest(self, stage: str) -> dict | None:
        path = self.stage_dir(stage) / "stage.json"
        if not path.exists():
            return None
        with open(path) as fh:
            return json.load(fh)

    def check_inputs(self, stage: str) -> dict[str, str]:
        """Hash every input, refusing missing or stale upstream artifacts."""
        hashes = {}
        for name, (path, producer) in self.inputs(stage).items():
            if producer is not None:
                man = self.read_manifest(producer)
                if man is None:
                    raise DataError(f"{stage}: missing upstream artifact {path} (run '{producer}' first)")
                if man["config"] != self.snapshot(producer):
                    raise StaleArtifact(f"{stage}: stale upstream artifact {path}: "
                                        f"'{producer}' was built with a different config; re-run it")
            if not path.exists():
                raise DataError(f"{stage}: missing input {path}")
            digest = file_sha256(path)
            if producer is not None and man["outputs"].get(path.name) != digest:
                raise StaleArtifact(f"{stage}: stale upstream artifact {path}: content hash "
                                    f"{digest[:12]} does not match the one recorded by '{producer}'")
            hashes[name] = digest
        return hashes

    def up_to_date(self, stage: str, input_hashes: Mapping[str, str]) -> bool:
        man = self.read_manifest(stage)
        if man is None or man["config"] != self.snapshot(stage) or man["inputs"] != dict(input_hashes):
            return False
        out = self.stage_dir(stage)
        return all((out / n).exists() and file_sha256(out / n) == h for n, h in man["outputs"].items())

    def run_stage(self, stage: str, force: bool = False) -> dict:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        hashes = self.check_inputs(stage)
        if not force and self.up_to_date(stage, hashes):
            log.info("%s: up to date, skipping", stage)
            return self.read_manifest(stage)
        final = self.stage_dir(stage)
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{final.name}.tmp-"))
        started = time.perf_counter()
        try:
            extra = STAGE_FUNCS[stage](self, tmp) or {}
            outputs = {p.name: file_sha256(p) for p in sorted(tmp.iterdir()) if p.is_file()}
            manifest = {"stage": stage, "config": self.snapshot(stage), "seed": derived_seed(self.cfg["seed"], stage),
                        "inputs": hashes, "outputs": outputs,
                        "wall_time_seconds": round(time.perf_counter() - started, 3), **extra}
            _atomic_json(tmp / "stage.json", manifest)
            trash = None
            if final.exists():
                trash = final.with_name(f".{final.name}.old-{os.getpid()}")
                os.replace(final, trash)
            os.replace(tmp, final)
            if trash is not None:
                shutil.rmtree(trash)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        log.info("%s: done in %.1fs", stage, manifest["wall_time_seconds"])
        return manifest

    def run_all(self, force: bool = False, start: str | None = None) -> None:
        first = STAGES.index(start) if start else 0
        for stage in STAGES[first:]:
            if stage == "synth" and self.external_data:
                continue
            self.run_stage(stage, force=force)

    # shared loaders
    def load_users(self):
        path, _ = self.events_path()
        d = self.cfg["data"]
        users, stats = load_users(path, tokenizer=d["tokenizer"], truncate=d["truncate"])
        log.info("loaded %d events for %d users (%d skipped, %d dropped)",
                 stats["events"], len(users), stats["skipped"], stats["dropped"])
        if not users:
            raise DataError(f"{path}: no usable events")
        return users, stats

    def load_store(self):
        d = self.stage_dir("encode-boi")
        with open(d / "boi_meta.json") as fh:
            meta = json.load(fh)
        return read_boi_records(d / "boi.jsonl", meta), meta


# --- stages ----------------------------------------------------------------

def _history_tag(h) -> str:
    return "full" if h is None else f"last{int(h)}"


def _stage_synth(p: Pipeline, out: Path) -> dict:
    cfg = SynthConfig(**_tuples(p.cfg["synth"]), seed=derived_seed(p.cfg["seed"], "synth"))
    manifest = generate(cfg, out)
    return {"n_users": len(manifest["users"])}


def _stage_train_items(p: Pipeline, out: Path) -> dict:
    users, stats = p.load_users()
    cfg = ItemEmbedConfig(**p.cfg["items"], seed=derived_seed(p.cfg["seed"], "train-items"))
    try:
        enc, curve = train_item_encoder(users, cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    enc.save(out / "encoder.ckpt")
    _atomic_json(out / "loss_curve.json", curve)
    return {"ingest": stats, "final_loss": curve[-1] if curve else None}


def _stage_fit_vocab(p: Pipeline, out: Path) -> dict:
    users, _ = p.load_users()
    enc = ItemEncoder.load(p.stage_dir("train-items") / "encoder.ckpt")
    items = PairCorpus(users).items
    emb = enc.encode(items).astype(np.float64)
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    cfg = VocabConfig(**p.cfg["vocab"], seed=derived_seed(p.cfg["seed"], "fit-vocab"))
    try:
        vocab = fit_vocabulary(emb, cfg.D, cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    vocab.save(out / "vocab.ckpt")
    return {"n_items": len(items), "objective": vocab.objective_trace[-1]}


def _stage_encode_boi(p: Pipeline, out: Path) -> dict:
    users, _ = p.load_users()
    enc = ItemEncoder.load(p.stage_dir("train-items") / "encoder.ckpt")
    vocab = InterestVocabulary.load(p.stage_dir("fit-vocab") / "vocab.ckpt")
    scales = p.cfg["boi"]["scales"]
    window = p.window()
    try:
        store = build_store(users, BoIEncoder(enc, vocab), window, scales, sorted(users))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    write_boi_records(store, out / "boi.jsonl")
    meta = {"D": vocab.D, "window": list(window), "fine": store.fine, "coarse": store.coarse,
            "mode": vocab.mode, "users": sorted(store.users)}
    _atomic_json(out / "boi_meta.json", meta)
    return {"n_users": len(store.users)}


def _stage_train_smen(p: Pipeline, out: Path) -> dict:
    store, meta = p.load_store()
    cfg = SmenConfig(D=meta["D"], scales=tuple(p.cfg["boi"]["scales"]), **p.cfg["smen"],
                     seed=derived_seed(p.cfg["seed"], "train-smen"))
    try:
        params, curve = train_smen(store, cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    params.save(out / "smen.ckpt")
    _atomic_json(out / "loss_curve.json", curve)
    return {"final_loss": curve[-1] if curve else None}


def write_representations(reps, path) -> None:
    """One JSON record per user: ``{user_id, M, H, empty, values}``."""
    with open(path, "w") as fh:
        for r in reps:
            M, H = r.anchors.shape
            values = r.anchors.astype(np.float64).reshape(-1).tolist()
            fh.write(json.dumps({"user_id": r.user_id, "M": M, "H": H, "empty": r.empty, "values": values}) + "\n")


def read_representations(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            vec = np.asarray(rec["values"], dtype=np.float64)
            if vec.size != rec["M"] * rec["H"]:
                raise DataError(f"{path}: record for {rec['user_id']!r} has {vec.size} values, "
                                f"expected M*H={rec['M'] * rec['H']}")
            out[rec["user_id"]] = vec
    return out


def _stage_infer(p: Pipeline, out: Path) -> dict:
    store, _ = p.load_store()
    params = SmenParams.load(p.stage_dir("train-smen") / "smen.ckpt")
    fmap = coarse_map(store.fine, store.coarse, store.window) if store.coarse else None
    seqs = [UserSequences(store.users[u], fmap) for u in sorted(store.users)]
    empty = {}
    for h in p.cfg["infer"]["history"]:
        reps = represent(params, seqs, period_range(store, h), batch_size=p.cfg["infer"]["batch_size"])
        write_representations(reps, out / f"repr_{_history_tag(h)}.jsonl")
        empty[_history_tag(h)] = sum(r.empty for r in reps)
    return {"empty_users": empty}


def _stage_probe(p: Pipeline, out: Path) -> dict:
    pc = p.cfg["probe"]
    base = {k: v for k, v in pc.items() if k not in ("repeats", "features")}
    seed0 = derived_seed(p.cfg["seed"], "probe")
    features: dict[str, Callable[[], Mapping[str, np.ndarray]]] = {}
    store = None
    for h in p.cfg["infer"]["history"]:
        tag = _history_tag(h)
        if "smen" in pc["features"]:
            features[f"smen@{tag}"] = lambda tag=tag: read_representations(p.stage_dir("infer") / f"repr_{tag}.jsonl")
        if "boi" in pc["features"]:
            if store is None:
                store, _ = p.load_store()
            features[f"boi@{tag}"] = lambda h=h: boi_features(store, period_range(store, h))
    rows = []
    for task_name, (path, _) in p.label_paths().items():
        try:
            task = read_labels(path, task_name)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        for tag, make in features.items():
            feats = make()
            for k in range(pc["repeats"]):
                try:
                    m = run_probe(feats, task, ProbeConfig(**base, seed=seed0 + k))
                except ValueError as exc:
                    raise DataError(f"probe {task_name}/{tag}: {exc}") from exc
                m["representation_tag"] = tag
                rows.append(m)
                log.info("probe %s %s seed %d: auc %.4f acc %.4f", task_name, tag, m["seed"], m["auc"], m["acc"])
    rows.sort(key=lambda r: (r["task"], r["representation_tag"], r["seed"]))
    write_metrics(rows, out / "metrics.csv", out / "metrics.json")
    return {"n_rows": len(rows)}


STAGE_FUNCS: dict[str, Callable[[Pipeline, Path], dict | None]] = {
    "synth": _stage_synth,
    "train-items": _stage_train_items,
    "fit-vocab": _stage_fit_vocab,
    "encode-boi": _stage_encode_boi,
    "train-smen": _stage_train_smen,
    "infer": _stage_infer,
    "probe": _stage_probe,
}


# --- sweeps and reporting --------------------------------------------------

def run_sweep(cfg: Mapping, param: str, values, force: bool = False) -> list[Path]:
    """Run the pipeline once per value of ``param``, sharing unaffected stages."""
    get_param(cfg, param)
    done = []
    base = Pipeline(cfg)
    base.run_all(force=force)
    for v in values:
        sub_cfg = set_param(cfg, param, v)
        validate_config(sub_cfg)
        pipe = Pipeline(sub_cfg, root=base.root, sweep=(param, v))
        start = STAGES[pipe._first_swept]
        pipe.run_all(force=force, start=start)
        done.append(pipe.stage_dir("probe"))
    return done


def _read_metric_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report(root, out_dir=None) -> list[dict]:
    """Aggregate every ``probe/metrics.csv`` under ``root``.

    Writes ``summary.csv`` (mean over probe seeds, sorted by task, tag, run),
    ``summary.txt`` and series files: ``series_history.csv`` and one
    ``series_<param>.csv`` per sweep.
    """
    root = Path(root)
    out = Path(out_dir) if out_dir is not None else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple[str, str, str], list[dict]] = {}
    for path in sorted(root.rglob("metrics.csv")):
        if out in path.parents or any(part.startswith(".") for part in path.relative_to(root).parts):
            continue
        run = path.parent.parent.relative_to(root).as_posix()
        for row in _read_metric_rows(path):
            groups.setdefault((row["task"], row["representation_tag"], run), []).append(row)
    summary = []
    for (task, tag, run), rows in sorted(groups.items()):
        aucs = [float(r["auc"]) for r in rows]
        accs = [float(r["acc"]) for r in rows]
        summary.append({"task": task, "representation_tag": tag, "run": run,
                        "auc": float(np.mean(aucs)), "auc_std": float(np.std(aucs)),
                        "acc": float(np.mean(accs)), "n_seeds": len(rows)})
    cols = ["task", "representation_tag", "run", "auc", "auc_std", "acc", "n_seeds"]
    _write_rows(out / "summary.csv", cols, summary)
    with open(out / "summary.txt", "w") as fh:
        fh.write(_table(cols, summary))

    history = []
    for row in summary:
        rep, _, tag = row["representation_tag"].partition("@")
        months = "full" if tag == "full" else tag.removeprefix("last")
        history.append({"run": row["run"], "task": row["task"], "representation": rep,
                        "history": months, "auc": row["auc"], "acc": row["acc"]})
    _write_rows(out / "series_history.csv", ["run", "task", "representation", "history", "auc", "acc"], history)

    sweeps: dict[str, list[dict]] = {}
    for row in summary:
        parts = row["run"].split("/")
        if len(parts) == 2 and parts[0] == "sweeps" and "=" in parts[1]:
            param, value = parts[1].split("=", 1)
            sweeps.setdefault(param, []).append({"value": json.loads(value), "task": row["task"],
                                                 "representation_tag": row["representation_tag"],
                                                 "auc": row["auc"], "acc": row["acc"]})
    for param, rows in sweeps.items():
        rows.sort(key=lambda r: (r["task"], r["representation_tag"], _value_key(r["value"])))
        for r in rows:
            if not isinstance(r["value"], (int, float, str)):
                r["value"] = json.dumps(r["value"], separators=(",", ":"), sort_keys=True)
        _write_rows(out / f"series_{param}.csv", ["value", "task", "representation_tag", "auc", "acc"], rows)
    return summary


def _value_key(v):
    # numbers in numeric order first, then anything else by its JSON text
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return (0, float(v), "")
    return (1, 0.0, json.dumps(v, sort_keys=True))


def _write_rows(path: Path, cols, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _table(cols, rows) -> str:
    cells = [cols] + [[f"{r[c]:.4f}" if isinstance(r[c], float) and math.isfinite(r[c]) else str(r[c])
                       for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
