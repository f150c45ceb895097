"""Dataset, draws and configuration persistence.

Every file is UTF-8 CSV with ``.`` decimals and floats written at 17
significant digits, so values survive a write/read cycle bit for bit and a
second write reproduces the first byte for byte.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from .diagnostics import SUMMARY_COLUMNS, DrawsMatrix
from .inference import PriorConfig
from .model import CovarianceSpec, FixedEffects, SubjectData, TreatmentParams
from .sampler import SamplerConfig
from .simulate import SimConfig

LONG_HEADER = ("subject_id", "occasion", "time", "y", "z")
SURV_HEADER = ("subject_id", "time", "event")
LONG_FILE = "longitudinal.csv"
SURV_FILE = "survival.csv"


class DataFormatError(ValueError):
    """Malformed input file; the message carries the path and row number."""


def fmt(x) -> str:
    return format(float(x), ".17g")


def _open_write(path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _read_rows(path, header):
    """Yield ``(line_number, row_dict)`` after checking the header."""
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, expected header {','.join(header)}") from None
        got = [h.strip() for h in got]
        missing = [h for h in header if h not in got]
        if missing:
            raise DataFormatError(f"{path}: missing column(s) {', '.join(missing)}")
        extra = [h for h in got if h not in header]
        if extra:
            raise DataFormatError(f"{path}: unexpected column(s) {', '.join(extra)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(got):
                raise DataFormatError(f"{path}, row {line}: expected {len(got)} fields, got {len(row)}")
            yield line, dict(zip(got, (c.strip() for c in row)))


def _parse(value, kind, path, line, column):
    try:
        out = kind(value)
    except ValueError:
        raise DataFormatError(f"{path}, row {line}: column {column} has invalid value {value!r}") from None
    if kind is float and not math.isfinite(out):
        raise DataFormatError(f"{path}, row {line}: column {column} must be finite")
    return out


def read_dataset(long_path, surv_path) -> list[SubjectData]:
    """Parse the two dataset files into validated subjects.

    Subjects appear in the order of the survival file. Rows of one subject
    may be interleaved with others in the longitudinal file; they are ordered
    by ``occasion``, which must run ``1..m`` without gaps.
    """
    long_rows: dict[str, list] = {}
    for line, row in _read_rows(long_path, LONG_HEADER):
        sid = row["subject_id"]
        if not sid:
            raise DataFormatError(f"{long_path}, row {line}: empty subject_id")
        occ = _parse(row["occasion"], int, long_path, line, "occasion")
        t = _parse(row["time"], float, long_path, line, "time")
        y = _parse(row["y"], float, long_path, line, "y")
        z = _parse(row["z"], int, long_path, line, "z")
        if z not in (0, 1):
            raise DataFormatError(f"{long_path}, row {line}: z must be 0 or 1")
        long_rows.setdefault(sid, []).append((occ, t, y, z, line))

    surv_rows: dict[str, tuple] = {}
    for line, row in _read_rows(surv_path, SURV_HEADER):
        sid = row["subject_id"]
        if sid in surv_rows:
            raise DataFormatError(f"{surv_path}, row {line}: duplicate subject_id {sid}")
        t = _parse(row["time"], float, surv_path, line, "time")
        d = _parse(row["event"], int, surv_path, line, "event")
        if d not in (0, 1):
            raise DataFormatError(f"{surv_path}, row {line}: event must be 0 or 1")
        surv_rows[sid] = (t, d, line)

    only_long = [s for s in long_rows if s not in surv_rows]
    only_surv = [s for s in surv_rows if s not in long_rows]
    if only_long or only_surv:
        parts = []
        if only_long:
            parts.append(f"in {long_path} only: {', '.join(only_long)}")
        if only_surv:
            parts.append(f"in {surv_path} only: {', '.join(only_surv)}")
        raise DataFormatError("orphan subject ids (" + "; ".join(parts) + ")")

    dataset = []
    for sid, (T, D, surv_line) in surv_rows.items():
        rows = sorted(long_rows[sid])
        occ = [r[0] for r in rows]
        if occ != list(range(1, len(rows) + 1)):
            raise DataFormatError(f"{long_path}: subject {sid} occasions must be 1..{len(rows)}, got {occ}")
        for prev, cur in zip(rows, rows[1:]):
            if cur[1] <= prev[1]:
                raise DataFormatError(
                    f"{long_path}, row {cur[4]}: subject {sid} times must be strictly increasing"
                )
            if cur[3] < prev[3]:
                raise DataFormatError(
                    f"{long_path}, row {cur[4]}: subject {sid} violates the treatment non-decreasing rule"
                )
        try:
            dataset.append(
                SubjectData(
                    id=sid,
                    times=[r[1] for r in rows],
                    values=[r[2] for r in rows],
                    treatment=[r[3] for r in rows],
                    survival_time=T,
                    event=D,
                )
            )
        except ValueError as exc:
            raise DataFormatError(f"{surv_path}, row {surv_line}: {exc}") from None
    if not dataset:
        raise DataFormatError(f"{surv_path}: no subjects")
    return dataset


def write_dataset(dataset, out_dir) -> tuple[Path, Path]:
    """Write ``longitudinal.csv`` and ``survival.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    long_path, surv_path = out_dir / LONG_FILE, out_dir / SURV_FILE
    with _open_write(long_path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_HEADER)
        for s in dataset:
            for j, (t, y, z) in enumerate(zip(s.times, s.values, s.treatment), start=1):
                w.writerow((s.id, j, fmt(t), fmt(y), int(z)))
    with _open_write(surv_path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURV_HEADER)
        for s in dataset:
            w.writerow((s.id, fmt(s.survival_time), s.event))
    return long_path, surv_path


def write_draws(draws: DrawsMatrix, path) -> Path:
    """One row per retained iteration: ``chain,iter,<names>`` (both 1-based)."""
    path = Path(path)
    with _open_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("chain", "iter", *draws.names))
        for c in range(draws.chains):
            for i in range(draws.iters):
                w.writerow((c + 1, i + 1, *(fmt(v) for v in draws.values[c, i])))
    return path


def read_draws(path) -> DrawsMatrix:
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if header[:2] != ["chain", "iter"]:
            raise DataFormatError(f"{path}: header must start with chain,iter")
        names = header[2:]
        chains: dict[int, list] = {}
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}, row {reader.line_num}: expected {len(header)} fields")
            try:
                chains.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
            except ValueError:
                raise DataFormatError(f"{path}, row {reader.line_num}: non-numeric value") from None
    if not chains:
        return DrawsMatrix(names, np.empty((0, 0, len(names))))
    lengths = {len(v) for v in chains.values()}
    if len(lengths) != 1:
        raise DataFormatError(f"{path}: chains have unequal lengths {sorted(lengths)}")
    values = np.array([chains[c] for c in sorted(chains)])
    return DrawsMatrix(names, values)


def write_summary(summary: dict, path) -> Path:
    """Table with one row per parameter: name, mean, sd, mcse, q2.5, q97.5, rhat."""
    path = Path(path)
    with _open_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("name", *SUMMARY_COLUMNS))
        for name, row in summary.items():
            w.writerow((name, *(fmt(row[c]) for c in SUMMARY_COLUMNS)))
    return path


def write_replicates(replicates, dataset, path) -> Path:
    """Long-format posterior predictive replicates aligned with the dataset rows."""
    replicates = np.asarray(replicates)
    keys = [(s.id, j + 1, t) for s in dataset for j, t in enumerate(s.times)]
    if replicates.ndim != 2 or replicates.shape[1] != len(keys):
        raise ValueError("replicates must be n_rep x total observations")
    path = Path(path)
    with _open_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("replicate", "subject_id", "occasion", "time", "y"))
        for r, row in enumerate(replicates, start=1):
            for (sid, occ, t), y in zip(keys, row):
                w.writerow((r, sid, occ, fmt(t), fmt(y)))
    return path


# ---- configuration ------------------------------------------------------------

_FIXED_KEYS = ("nu", "sigma0", "gamma0", "gamma1", "weibull_k", "weibull_xi")
_SIM_INT_KEYS = ("n_subjects", "m_per_subject")
_PRIOR_KEYS = tuple(f.name for f in fields(PriorConfig))
_SAMPLER_KEYS = {
    "chains": "n_chains",
    "iters": "iters",
    "warmup": "warmup",
    "target_accept": "target_accept",
    "max_tree_depth": "max_tree_depth",
    "divergence_threshold": "divergence_threshold",
    "init_step_size": "init_step_size",
}
_INT_KEYS = {"seed", "n_subjects", "m_per_subject", "chains", "iters", "warmup", "max_tree_depth"}

CONFIG_KEYS = (
    "seed",
    *_SIM_INT_KEYS,
    "beta0", "beta1", "beta2", "beta3",
    *_FIXED_KEYS,
    "alpha0", "alpha1",
    "covariance",
    *_PRIOR_KEYS,
    *_SAMPLER_KEYS,
)


@dataclass(frozen=True)
class RunConfig:
    """Simulation, prior and sampler settings for one CLI invocation."""

    sim: SimConfig = field(default_factory=SimConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    @classmethod
    def from_mapping(cls, values: dict) -> RunConfig:
        """Build from flat keys (see ``CONFIG_KEYS``); unknown keys are rejected."""
        unknown = sorted(set(values) - set(CONFIG_KEYS))
        if unknown:
            raise ValueError(f"unknown configuration key(s): {', '.join(unknown)}")
        for key, v in values.items():
            if key == "covariance":
                continue
            if key in _INT_KEYS:
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ValueError(f"configuration key {key} must be an integer")
            elif isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ValueError(f"configuration key {key} must be a number")

        base_fixed = FixedEffects()
        beta = [values.get(f"beta{i}", b) for i, b in enumerate(base_fixed.beta)]
        fixed = replace(base_fixed, beta=tuple(beta), **{k: float(values[k]) for k in _FIXED_KEYS if k in values})
        alpha = TreatmentParams(
            alpha0=float(values.get("alpha0", TreatmentParams.alpha0)),
            alpha1=float(values.get("alpha1", TreatmentParams.alpha1)),
        )
        sim_kw = {k: values[k] for k in _SIM_INT_KEYS if k in values}
        if "covariance" in values:
            cov = np.asarray(values["covariance"], dtype=float)
            if cov.shape != (5, 5):
                raise ValueError("configuration key covariance must be a 5x5 array")
            sim_kw["covariance"] = CovarianceSpec.from_covariance(cov)
        seed = values.get("seed", 0)
        sim = SimConfig(fixed=fixed, alpha=alpha, seed=seed, **sim_kw)
        prior = PriorConfig(**{k: float(values[k]) for k in _PRIOR_KEYS if k in values})
        sampler = SamplerConfig(seed=seed, **{_SAMPLER_KEYS[k]: values[k] for k in _SAMPLER_KEYS if k in values})
        return cls(sim=sim, prior=prior, sampler=sampler)


def load_config(path) -> dict:
    """Read a flat TOML file into a plain dict (no tables allowed)."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            values = tomli.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ValueError(f"{path}: {exc}") from None
    tables = [k for k, v in values.items() if isinstance(v, dict)]
    if tables:
        raise ValueError(f"{path}: tables are not supported ({', '.join(tables)}); use flat keys")
    return values
