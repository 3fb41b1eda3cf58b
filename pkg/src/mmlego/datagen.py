"""Synthetic multimodal data with a shared latent factor, plus on-disk formats.

Every sample draws a factor ``z ~ N(0, I_k)``.  Labels depend on ``z`` only
through the score ``s = z . beta`` (``|beta| = 1``).  Each modality sees a
noisy linear view of ``z``: a tabular row, or a bag of noisy instances.
Because the modalities carry independent noise on the same signal, each
is informative alone and more informative together.

File formats
------------
tabular CSV
    header ``sample_id,f0,...,f{d-1}``; one row per available sample.
bag container (little-endian)
    ``b"MMLG"``, ``u16`` version, then records until EOF; each record is
    ``u32`` id length, UTF-8 id, ``u32`` n_instances, ``u32`` feat_dim,
    ``n_instances * feat_dim`` row-major ``f64``.
labels CSV
    ``sample_id,task_kind,value,censorship``; ``value`` is the class index
    or the observed survival time.
"""

import csv
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .encoders import collate_bags
from .errors import (ConfigError, EmptyBag, MalformedFile, NoModalityAvailable,
                     TooFewSamples, VersionUnsupported)
from .training import Labels, TaskSpec, assign_bins, survival_bin_edges

BAG_MAGIC = b"MMLG"
BAG_VERSION = 1
MODALITY_KINDS = ("tabular", "bag")


@dataclass
class ModalitySpec:
    name: str
    kind: str = "tabular"
    dim: int = 32
    snr: float = 1.0
    n_instances: tuple = (4, 12)

    def __post_init__(self):
        if self.kind not in MODALITY_KINDS:
            raise ConfigError(f"modality kind must be one of {MODALITY_KINDS}")
        if self.snr < 0:
            raise ConfigError("snr must be non-negative")
        self.n_instances = tuple(int(v) for v in self.n_instances)
        if self.kind == "bag" and not 1 <= self.n_instances[0] <= self.n_instances[1]:
            raise ConfigError(f"bag instance range must satisfy 1 <= lo <= hi, got {self.n_instances}")

    @property
    def signal_weight(self):
        """Fraction of variance carried by the shared factor: snr / (1 + snr)."""
        return 1.0 if np.isinf(self.snr) else self.snr / (1.0 + self.snr)


def _default_modalities():
    return (ModalitySpec("tab", "tabular", 32, 1.0), ModalitySpec("bag", "bag", 16, 1.0))


@dataclass
class SyntheticSpec:
    n_samples: int = 2000
    modalities: tuple = field(default_factory=_default_modalities)
    factor_dim: int = 8
    task: TaskSpec = field(default_factory=TaskSpec)
    class_balance: float = 0.5
    label_noise: float = 0.0
    censoring_rate: float = 0.3
    risk_scale: float = 1.0
    overlap: float = 1.0
    n_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        self.modalities = tuple(m if isinstance(m, ModalitySpec) else ModalitySpec(**m)
                                for m in self.modalities)
        if isinstance(self.task, dict):
            self.task = TaskSpec(**self.task)
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names) or not names:
            raise ConfigError(f"modality names must be unique and non-empty, got {names}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap must lie in [0, 1], got {self.overlap}")
        if not 0.0 < self.class_balance < 1.0:
            raise ConfigError("class_balance must lie in (0, 1)")
        if not 0.0 <= self.censoring_rate < 1.0:
            raise ConfigError("censoring_rate must lie in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["task"] = self.task.to_dict()
        d["modalities"] = [dict(asdict(m), n_instances=list(m.n_instances),
                                snr=float(m.snr)) for m in self.modalities]
        return d


@dataclass
class ModalityData:
    """One modality over all samples; rows of unavailable samples are NaN / None."""

    name: str
    kind: str
    dim: int
    values: object  # (n, dim) array for tabular, list of (n_i, dim) arrays for bags


class MultimodalDataset:
    """Per-modality tables, raw labels, availability and fold assignments."""

    def __init__(self, sample_ids, modalities, task, y, times=None, censorship=None,
                 availability=None, folds=None, spec=None):
        self.sample_ids = np.asarray(sample_ids, dtype=object)
        self.modalities = {m.name: m for m in modalities}
        self.task = task
        self.y = np.asarray(y)
        self.times = None if times is None else np.asarray(times, dtype=np.float64)
        self.censorship = None if censorship is None else np.asarray(censorship, dtype=np.int64)
        n = len(self.sample_ids)
        if availability is None:
            availability = np.ones((n, len(self.modalities)), dtype=bool)
        self.availability = np.asarray(availability, dtype=bool)
        self.folds = folds or []
        self.spec = spec
        if not self.availability.any(axis=1).all():
            raise NoModalityAvailable("every sample needs at least one available modality")

    def __len__(self):
        return len(self.sample_ids)

    @property
    def modality_names(self):
        return list(self.modalities)

    def column(self, modality):
        return self.modality_names.index(modality)

    def available(self, modality, idx=None):
        """Subset of ``idx`` (default: all samples) where ``modality`` is present."""
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        return idx[self.availability[idx, self.column(modality)]]

    def inputs(self, modality, idx):
        """Raw model inputs for samples ``idx``: a matrix, or ``(bags, mask)``."""
        m = self.modalities[modality]
        if not self.availability[idx, self.column(modality)].all():
            raise NoModalityAvailable(f"modality {modality!r} missing for some requested samples")
        if m.kind == "tabular":
            return m.values[idx]
        return collate_bags([m.values[i] for i in idx], m.dim)

    def bin_edges(self, idx):
        return survival_bin_edges(self.times[idx], self.censorship[idx], self.task.n_bins)

    def labels(self, idx, edges=None):
        """Model targets for ``idx``; survival bins use ``edges`` from the training split."""
        idx = np.asarray(idx)
        if self.task.kind != "survival":
            return Labels(self.task.kind, self.y[idx].astype(np.int64))
        if edges is None:
            raise ConfigError("survival labels need bin edges from the training split")
        return Labels("survival", assign_bins(self.times[idx], edges), self.times[idx],
                      self.censorship[idx])

    def with_availability(self, availability):
        out = MultimodalDataset(self.sample_ids, self.modalities.values(), self.task, self.y,
                                self.times, self.censorship, availability, self.folds, self.spec)
        return out


# -- batch sources ---------------------------------------------------------------------


class ModalitySource:
    """Batches of one modality's inputs, for training or evaluating a single block."""

    def __init__(self, dataset, modality, idx):
        self.dataset, self.modality = dataset, modality
        self.idx = np.asarray(idx)

    def __len__(self):
        return len(self.idx)

    def collate(self, rows):
        return self.dataset.inputs(self.modality, self.idx[rows])


class MultiBatch:
    """Samples with possibly-missing modalities, for merged/fused/ensemble models."""

    def __init__(self, dataset, idx, availability):
        self.dataset = dataset
        self.idx = np.asarray(idx)
        self._avail = availability

    def __len__(self):
        return len(self.idx)

    def availability(self, modalities):
        return np.stack([self._avail[:, self.dataset.column(m)] for m in modalities], axis=1)

    def positions(self, modality):
        return np.flatnonzero(self._avail[:, self.dataset.column(modality)])

    def take(self, modality, positions):
        return self.dataset.inputs(modality, self.idx[positions])


class MultiSource:
    """Batch source over several modalities; ``mask`` hides modalities at evaluation."""

    def __init__(self, dataset, idx, mask=()):
        self.dataset = dataset
        self.idx = np.asarray(idx)
        self.avail = dataset.availability[self.idx].copy()
        for m in mask:
            self.avail[:, dataset.column(m)] = False

    def __len__(self):
        return len(self.idx)

    def collate(self, rows):
        return MultiBatch(self.dataset, self.idx[rows], self.avail[rows])


# -- generation ------------------------------------------------------------------------


def split_folds(n, n_folds=5, ratios=(0.70, 0.15, 0.15), seed=0):
    """Repeated random subsampling: each fold is an independent permutation.

    Returns a list of ``(train, val, test)`` index arrays.
    """
    if n < 20:
        raise TooFewSamples(f"need at least 20 samples to split, got {n}")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise ConfigError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    rng = np.random.default_rng([seed, 7])
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    folds = []
    for _ in range(n_folds):
        perm = rng.permutation(n)
        folds.append((np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                      np.sort(perm[n_train + n_val:])))
    return folds


def overlap_availability(n, modalities, train_idx, rho, seed=0):
    """Availability mask where only ``floor(rho * n_train)`` training samples are paired.

    The remaining training samples are dealt out evenly to single
    modalities, so ``rho = 0`` gives disjoint per-modality training sets.
    Samples outside ``train_idx`` keep every modality.
    """
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"overlap must lie in [0, 1], got {rho}")
    k = len(modalities)
    avail = np.ones((n, k), dtype=bool)
    train_idx = np.asarray(train_idx)
    n_paired = int(np.floor(rho * len(train_idx)))
    perm = np.random.default_rng([seed, 11]).permutation(train_idx)
    for j, i in enumerate(perm[n_paired:]):
        avail[i] = False
        avail[i, j % k] = True
    return avail


def apply_overlap(dataset, train_idx, rho, seed=0):
    avail = overlap_availability(len(dataset), dataset.modality_names, train_idx, rho, seed)
    return dataset.with_availability(avail)


def _censor_rate(hazard, target):
    """Rate of an exponential censoring clock giving the ``target`` censored fraction.

    For event rate ``h`` and clock rate ``c``, ``P(censored) = c / (c + h)``;
    the average over samples is increasing in ``c``.
    """
    if target == 0.0:
        return 0.0
    f = lambda log_c: np.mean(np.exp(log_c) / (np.exp(log_c) + hazard)) - target
    return float(np.exp(brentq(f, -60.0, 60.0, xtol=1e-12)))


def generate(spec):
    """Draw a :class:`MultimodalDataset` from ``spec`` (deterministic in ``spec.seed``)."""
    n, k = spec.n_samples, spec.factor_dim
    root = np.random.default_rng([spec.seed, 0])
    z = root.normal(size=(n, k))
    beta = root.normal(size=k)
    beta /= np.linalg.norm(beta)
    score = z @ beta
    noisy = score + spec.label_noise * root.normal(size=n)
    sd = np.sqrt(1.0 + spec.label_noise ** 2)
    task = spec.task
    times = censorship = None
    if task.kind == "binary":
        y = (noisy > sd * norm.ppf(1.0 - spec.class_balance)).astype(np.int64)
    elif task.kind == "multiclass":
        cuts = sd * norm.ppf(np.linspace(0.0, 1.0, task.n_classes + 1)[1:-1])
        y = np.searchsorted(cuts, noisy).astype(np.int64)
    else:
        hazard = np.exp(spec.risk_scale * noisy)
        event = root.exponential(1.0 / hazard)
        c_rate = _censor_rate(hazard, spec.censoring_rate)
        clock = root.exponential(1.0 / c_rate, size=n) if c_rate > 0 else np.full(n, np.inf)
        censorship = (clock < event).astype(np.int64)
        times = np.minimum(event, clock)
        y = times

    mods = []
    for j, m in enumerate(spec.modalities):
        rng = np.random.default_rng([spec.seed, 1, j])
        # random loading matrix scaled so the signal part has unit variance per feature
        load = rng.normal(size=(k, m.dim)) / np.sqrt(k)
        w = m.signal_weight
        signal = np.sqrt(w) * (z @ load)
        if m.kind == "tabular":
            values = signal + np.sqrt(1.0 - w) * rng.normal(size=(n, m.dim))
        else:
            lo, hi = m.n_instances
            counts = rng.integers(lo, hi + 1, size=n)
            shared_noise = rng.normal(size=(n, m.dim))
            values = []
            for i in range(n):
                inst_noise = rng.normal(size=(counts[i], m.dim))
                noise = (shared_noise[i] + inst_noise) / np.sqrt(2.0)
                values.append(signal[i] + np.sqrt(1.0 - w) * noise)
        mods.append(ModalityData(m.name, m.kind, m.dim, values))

    ids = [f"s{i:05d}" for i in range(n)]
    folds = split_folds(n, spec.n_folds, seed=spec.seed)
    names = [m.name for m in spec.modalities]
    avail = overlap_availability(n, names, folds[0][0], spec.overlap, spec.seed)
    ds = MultimodalDataset(ids, mods, task, y, times, censorship, avail, folds, spec)
    ds.score = score
    return ds


# -- file formats ----------------------------------------------------------------------


def write_tabular_csv(path, sample_ids, values):
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + [f"f{j}" for j in range(values.shape[1])])
        for sid, row in zip(sample_ids, values):
            w.writerow([sid] + [repr(float(v)) for v in row])


def read_tabular_csv(path):
    """Returns ``(sample_ids, values)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "sample_id":
        raise MalformedFile(f"{path}: missing sample_id header", 0)
    dim = len(rows[0]) - 1
    if rows[0][1:] != [f"f{j}" for j in range(dim)]:
        raise MalformedFile(f"{path}: feature columns must be f0..f{dim - 1}", 0)
    ids, vals = [], np.empty((len(rows) - 1, dim))
    for r, row in enumerate(rows[1:]):
        if len(row) != dim + 1:
            raise MalformedFile(f"{path}: row {r + 1} has {len(row)} fields, expected {dim + 1}")
        ids.append(row[0])
        try:
            vals[r] = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise MalformedFile(f"{path}: row {r + 1}: {exc}") from None
    return ids, vals


def write_bags(path, sample_ids, bags):
    parts = [BAG_MAGIC, struct.pack("<H", BAG_VERSION)]
    for sid, bag in zip(sample_ids, bags):
        bag = np.ascontiguousarray(bag, dtype="<f8")
        raw = sid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<II", bag.shape[0], bag.shape[1]))
        parts.append(bag.tobytes())
    _atomic_write(path, b"".join(parts))


def read_bags(path):
    """Returns ``(sample_ids, bags)``; structural problems raise :class:`MalformedFile`."""
    buf = Path(path).read_bytes()
    return parse_bags(buf)


def parse_bags(buf):
    if len(buf) < 6 or buf[:4] != BAG_MAGIC:
        raise MalformedFile("not a bag container (bad magic)", 0)
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != BAG_VERSION:
        raise VersionUnsupported(f"bag container version {version} is not supported")
    pos = 6
    ids, bags = [], []

    def need(n, what):
        if pos + n > len(buf):
            raise MalformedFile(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos)

    while pos < len(buf):
        need(4, "id length")
        (id_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(id_len, "sample id")
        try:
            sid = buf[pos:pos + id_len].decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedFile("sample id is not valid UTF-8", pos) from None
        pos += id_len
        need(8, "bag header")
        n_inst, dim = struct.unpack_from("<II", buf, pos)
        if n_inst == 0:
            raise EmptyBag(f"sample {sid!r} has an empty bag (at byte offset {pos})")
        pos += 8
        need(8 * n_inst * dim, "bag payload")
        bags.append(np.frombuffer(buf, dtype="<f8", count=n_inst * dim, offset=pos)
                    .reshape(n_inst, dim).astype(np.float64))
        ids.append(sid)
        pos += 8 * n_inst * dim
    return ids, bags


def write_labels_csv(path, sample_ids, task_kind, values, censorship=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "task_kind", "value", "censorship"])
        for i, sid in enumerate(sample_ids):
            c = 0 if censorship is None else int(censorship[i])
            v = values[i]
            w.writerow([sid, task_kind, repr(float(v)) if task_kind == "survival" else int(v), c])


def read_labels_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["sample_id", "task_kind", "value", "censorship"]:
        raise MalformedFile(f"{path}: header must be sample_id,task_kind,value,censorship", 0)
    ids, kinds, vals, cens = [], set(), [], []
    for r, row in enumerate(rows[1:]):
        if len(row) != 4:
            raise MalformedFile(f"{path}: row {r + 1} has {len(row)} fields, expected 4")
        ids.append(row[0])
        kinds.add(row[1])
        vals.append(float(row[2]))
        cens.append(int(row[3]))
    if len(kinds) > 1:
        raise MalformedFile(f"{path}: mixed task kinds {sorted(kinds)}")
    return ids, (kinds.pop() if kinds else None), np.array(vals), np.array(cens, dtype=np.int64)


def _atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_dataset(ds, directory):
    """Write modality files, labels, folds and a JSON manifest into ``directory``.

    Only available samples are written to each modality file; availability
    is recovered on load from which ids appear where.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, m in ds.modalities.items():
        rows = ds.available(name)
        ids = [ds.sample_ids[i] for i in rows]
        if m.kind == "tabular":
            fname = f"{name}.csv"
            write_tabular_csv(d / fname, ids, m.values[rows])
        else:
            fname = f"{name}.bags"
            write_bags(d / fname, ids, [m.values[i] for i in rows])
        files[name] = {"file": fname, "kind": m.kind, "dim": m.dim}
    write_labels_csv(d / "labels.csv", ds.sample_ids, ds.task.kind,
                     ds.times if ds.task.kind == "survival" else ds.y, ds.censorship)
    with open(d / "folds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "split", "sample_id"])
        for f, parts in enumerate(ds.folds):
            for split, idx in zip(("train", "val", "test"), parts):
                for i in idx:
                    w.writerow([f, split, ds.sample_ids[i]])
    manifest = {"format": "mmlego-dataset", "version": 1, "n_samples": len(ds),
                "task": ds.task.to_dict(), "modalities": files,
                "spec": ds.spec.to_dict() if ds.spec is not None else None}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(directory):
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"{d / 'manifest.json'}: {exc}") from None
    if manifest.get("version") != 1:
        raise VersionUnsupported(f"dataset version {manifest.get('version')} is not supported")
    task = TaskSpec(**manifest["task"])
    ids, kind, vals, cens = read_labels_csv(d / "labels.csv")
    if kind is not None and kind != task.kind:
        raise MalformedFile(f"labels are {kind!r} but the manifest says {task.kind!r}")
    pos = {sid: i for i, sid in enumerate(ids)}
    n = len(ids)
    mods, avail = [], np.zeros((n, len(manifest["modalities"])), dtype=bool)
    for j, (name, info) in enumerate(manifest["modalities"].items()):
        if info["kind"] == "tabular":
            mids, rows = read_tabular_csv(d / info["file"])
            values = np.full((n, info["dim"]), np.nan)
        else:
            mids, rows = read_bags(d / info["file"])
            values = [None] * n
        for sid, row in zip(mids, rows):
            if sid not in pos:
                raise MalformedFile(f"{info['file']}: sample {sid!r} has no label")
            if np.shape(row)[-1] != info["dim"]:
                raise MalformedFile(f"{info['file']}: sample {sid!r} has wrong feature dim")
            values[pos[sid]] = row
            avail[pos[sid], j] = True
        mods.append(ModalityData(name, info["kind"], info["dim"], values))
    folds = []
    fold_path = d / "folds.csv"
    if fold_path.exists():
        with open(fold_path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        n_folds = 1 + max((int(r[0]) for r in rows), default=-1)
        parts = [{"train": [], "val": [], "test": []} for _ in range(n_folds)]
        for f, split, sid in rows:
            parts[int(f)][split].append(pos[sid])
        folds = [tuple(np.array(sorted(p[s]), dtype=np.int64) for s in ("train", "val", "test"))
                 for p in parts]
    if task.kind == "survival":
        return MultimodalDataset(ids, mods, task, vals, vals, cens, avail, folds)
    return MultimodalDataset(ids, mods, task, vals.astype(np.int64), None, None, avail, folds)
