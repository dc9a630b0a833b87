"""On-disk formats: versioned JSON models and task bundles, hashed manifests,
iteration-log CSV and run configuration files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from mmilab.gauss_hmm import AcousticModel
from mmilab.lattice import LatticeConfig
from mmilab.lexicon_lm import BigramLm, Lexicon, SilencePolicy
from mmilab.synth import Corpus, Task, TaskSpec, Utterance
from mmilab.training import EbwConfig, EvalPlan, IterationLog, Regime

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

MODEL_FORMAT = "mmilab-model"
BUNDLE_FORMAT = "mmilab-task"
FORMAT_VERSION = 1
CONFIG_SCHEMA_VERSION = 1

CSV_COLUMNS = ("iter", "num_ll_pf", "den_ll_pf", "log_mmi_pf", "exact_log_mmi_pf", "param_dist",
               "floored_count", "train_wer_a", "train_wer_b_or_c", "test_wer", "mpe_criterion")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# JSON helpers


def _num(x: float):
    """JSON cannot hold infinities; -inf (an impossible event) is stored as null."""
    x = float(x)
    if math.isnan(x) or x == math.inf:
        raise FormatError(f"cannot serialise {x}")
    return None if x == -math.inf else x


def _arr(a) -> list:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return _num(a)
    return [_arr(r) if a.ndim > 1 else _num(r) for r in a]


def _unarr(v) -> np.ndarray:
    def conv(x):
        if isinstance(x, list):
            return [conv(y) for y in x]
        return -math.inf if x is None else float(x)

    return np.array(conv(v), dtype=float)


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _check_header(doc: dict, kind: str) -> None:
    if doc.get("format") != kind:
        raise FormatError(f"expected a {kind} document, got {doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported {kind} version {doc.get('version')!r}")


# ---------------------------------------------------------------------------
# models


def model_to_dict(m: AcousticModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "phones": list(m.phones),
        "phone_states": {p: list(m.phone_states[p]) for p in m.phone_states},
        "means": _arr(m.means),
        "variances": _arr(m.variances),
        "self_loop": _arr(m.self_loop),
        "floor": _arr(m.floor),
        "sil_prob": float(m.sil_prob),
        "silence": m.silence,
    }


def model_from_dict(d: dict) -> AcousticModel:
    _check_header(d, MODEL_FORMAT)
    return AcousticModel(tuple(d["phones"]), {p: tuple(v) for p, v in d["phone_states"].items()},
                         _unarr(d["means"]), _unarr(d["variances"]), _unarr(d["self_loop"]),
                         _unarr(d["floor"]), float(d["sil_prob"]), d["silence"])


def save_model(m: AcousticModel, path) -> None:
    write_text(path, dumps(model_to_dict(m)))


def load_model(path) -> AcousticModel:
    return model_from_dict(read_json(path))


# ---------------------------------------------------------------------------
# task bundles


def _lm_to_dict(lm: BigramLm) -> dict:
    return {"vocab": list(lm.vocab), "logp": _arr(lm.logp)}


def _lm_from_dict(d: dict) -> BigramLm:
    return BigramLm(tuple(d["vocab"]), _unarr(d["logp"]))


def _corpus_to_list(c: Corpus) -> list:
    return [{"uid": u.uid, "words": list(u.words), "frames": _arr(u.frames)} for u in c]


def _corpus_from_list(items: list) -> Corpus:
    out = []
    for it in items:
        fr = _unarr(it["frames"])
        out.append(Utterance(it["uid"], fr.reshape(len(it["frames"]), -1), tuple(it["words"])))
    return Corpus(tuple(out))


def task_to_dict(spec: TaskSpec, task: Task) -> dict:
    return {
        "format": BUNDLE_FORMAT,
        "version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "lexicon": {w: list(p) for w, p in task.lexicon.entries.items()},
        "train_lm": _lm_to_dict(task.train_lm),
        "test_lm": _lm_to_dict(task.test_lm),
        "true_model": model_to_dict(task.true_model),
        "train": _corpus_to_list(task.train),
        "test": _corpus_to_list(task.test),
    }


def task_from_dict(d: dict):
    """(TaskSpec, Task) from a bundle document."""
    _check_header(d, BUNDLE_FORMAT)
    spec = TaskSpec(**d["spec"])
    task = Task(Lexicon({w: tuple(p) for w, p in d["lexicon"].items()}), _lm_from_dict(d["train_lm"]),
                _lm_from_dict(d["test_lm"]), model_from_dict(d["true_model"]),
                _corpus_from_list(d["train"]), _corpus_from_list(d["test"]))
    return spec, task


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, names: List[str]) -> Path:
    directory = Path(directory)
    doc = {"format": "mmilab-manifest", "version": FORMAT_VERSION,
           "files": {n: sha256_file(directory / n) for n in sorted(names)}}
    path = directory / "manifest.json"
    write_text(path, dumps(doc))
    return path


def verify_manifest(directory) -> Dict[str, bool]:
    directory = Path(directory)
    doc = read_json(directory / "manifest.json")
    return {n: (directory / n).exists() and sha256_file(directory / n) == h for n, h in doc["files"].items()}


# ---------------------------------------------------------------------------
# CSV


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return "%.17g" % x


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    write_text(path, buf.getvalue())


def read_csv(path) -> List[Dict[str, Optional[float]]]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (float(v) if v != "" else None) for k, v in r.items()} for r in rows]


def iteration_rows(log: IterationLog) -> list:
    out = []
    for r in log.rows:
        c, e = r.criterion, r.exact
        out.append([r.iter, c.num_ll_per_frame, c.den_ll_per_frame, c.log_mmi_per_frame,
                    e.log_mmi_per_frame if e is not None else None, r.param_dist, r.floored_count,
                    r.train_wer_a, r.train_wer_b_or_c, r.test_wer, r.mpe_criterion])
    return out


def write_iteration_csv(log: IterationLog, path) -> None:
    write_csv(path, CSV_COLUMNS, iteration_rows(log))


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    ebw: EbwConfig = field(default_factory=EbwConfig)
    regime: Regime = Regime.FIXED
    criterion: str = "mmi"
    iters: int = 100
    ml_iters: int = 20
    plan: EvalPlan = field(default_factory=EvalPlan)
    e_values: tuple = (0.5, 1.0, 2.0)
    out: str = "out"
    jobs: int = 0  # 0 means MMILAB_JOBS or 1


_SECTIONS = {
    "task": TaskSpec,
    "lattice": LatticeConfig,
    "ebw": EbwConfig,
    "eval": EvalPlan,
}
_ENUMS = (Regime, SilencePolicy)
_RUN_KEYS = {"regime", "criterion", "iters", "ml_iters", "e_values", "out", "jobs"}


def _coerce(path: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
        return tuple(value)
    if default is None:
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(path, "expected a list of numbers")
        return tuple(float(v) for v in value)
    if isinstance(default, _ENUMS):
        try:
            return type(default)(value)
        except ValueError:
            raise ConfigError(path, f"invalid value {value!r}") from None
    raise ConfigError(path, "unsupported field")


def _section(name: str, cls, table) -> Any:
    if not isinstance(table, dict):
        raise ConfigError(name, "expected a table")
    base = cls()
    known = {f.name for f in fields(cls)}
    kw = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        kw[key] = _coerce(f"{name}.{key}", value, getattr(base, key))
    try:
        return cls(**{**{f.name: getattr(base, f.name) for f in fields(cls)}, **kw})
    except (ValueError, TypeError) as e:
        raise ConfigError(name, str(e)) from None


def parse_config(doc: dict) -> RunConfig:
    if "schema_version" not in doc:
        raise ConfigError("schema_version", "missing required field")
    if doc["schema_version"] != CONFIG_SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {doc['schema_version']!r}")
    cfg = RunConfig()
    run = doc.get("run", {})
    for key in doc:
        if key not in _SECTIONS and key not in ("schema_version", "run"):
            raise ConfigError(key, "unknown key")
    if not isinstance(run, dict):
        raise ConfigError("run", "expected a table")
    for key, value in run.items():
        if key not in _RUN_KEYS:
            raise ConfigError(f"run.{key}", "unknown key")
        setattr(cfg, key, _coerce(f"run.{key}", value, getattr(cfg, key)))
    if cfg.criterion not in ("mmi", "mpe"):
        raise ConfigError("run.criterion", "must be 'mmi' or 'mpe'")
    for key in ("iters", "ml_iters", "jobs"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"run.{key}", "out of range")
    for name, cls in _SECTIONS.items():
        if name in doc:
            attr = "plan" if name == "eval" else name
            setattr(cfg, attr, _section(name, cls, doc[name]))
    if "kappa" in doc.get("lattice", {}) and "kappa" not in doc.get("ebw", {}):
        cfg.ebw = EbwConfig(**{**_fields(cfg.ebw), "kappa": cfg.lattice.kappa})
    elif "kappa" in doc.get("ebw", {}) and "kappa" not in doc.get("lattice", {}):
        cfg.lattice = LatticeConfig(**{**_fields(cfg.lattice), "kappa": cfg.ebw.kappa})
    if cfg.lattice.kappa != cfg.ebw.kappa:
        raise ConfigError("ebw.kappa", "must equal lattice.kappa")
    return cfg


def _fields(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("<file>", f"not valid TOML: {e}") from None
    return parse_config(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-data echo of a resolved configuration, stored next to run outputs."""

    def plain(v):
        if isinstance(v, _ENUMS):
            return v.value
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, np.ndarray):
            return _arr(v)
        return v

    out: Dict[str, Any] = {"schema_version": CONFIG_SCHEMA_VERSION}
    # the output location is left out so results do not depend on where they are written
    out["run"] = {k: plain(getattr(cfg, k)) for k in sorted(_RUN_KEYS - {"out"})}
    for name in _SECTIONS:
        obj = cfg.plan if name == "eval" else getattr(cfg, name)
        out[name] = {k: plain(v) for k, v in _fields(obj).items() if v is not None}
    return out
