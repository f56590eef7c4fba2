"""Embedding storage, trial protocols, and the synthetic workload generator.

File formats (tab-separated, UTF-8, lines starting with ``#`` after the
header are treated as comments):

* Embedding file: header ``#EMB v1 d_spk=<int> d_cm=<int>``, then one line
  per stored vector: ``utt_id<TAB>spk|cm<TAB>comma-separated floats``.
  Floats are written with 17 significant digits so 64-bit values round-trip
  exactly.
* Protocol file: one trial per line,
  ``enroll_ids(comma-joined)<TAB>test_id<TAB>label`` with label one of
  target / nontarget / spoof.
"""

from __future__ import annotations

import math
import os
import re
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

LABELS = ("target", "nontarget", "spoof")
PARTITIONS = ("train", "dev", "eval")

_EMB_HEADER = re.compile(r"^#EMB v1 d_spk=(\d+) d_cm=(\d+)$")


@contextmanager
def atomic_write(path: str, mode: str = "w"):
    """Write to a temp file and rename on success, so readers never see
    a truncated artifact."""
    tmp = f"{path}.tmp"
    fh = open(tmp, mode)
    try:
        yield fh
        fh.close()
        os.replace(tmp, path)
    except BaseException:
        fh.close()
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def format_float(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class Trial:
    enroll_ids: tuple[str, ...]
    test_id: str
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown trial label {self.label!r}")
        if not self.enroll_ids or not self.test_id:
            raise ValueError("trial needs enrollment ids and a test id")


@dataclass
class Protocol:
    trials: list[Trial]
    partition: str = "eval"

    def __len__(self) -> int:
        return len(self.trials)

    def trial_ids(self) -> list[str]:
        """Stable per-line ids used in score files: t000000, t000001, ..."""
        return [f"t{i:06d}" for i in range(len(self.trials))]

    def labels(self) -> list[str]:
        return [t.label for t in self.trials]


class EmbeddingStore:
    """Utterance id -> (speaker embedding, CM embedding), with fixed dims."""

    def __init__(self, d_spk: int, d_cm: int):
        if d_spk < 1 or d_cm < 1:
            raise ValueError(f"embedding dims must be positive, got {d_spk}, {d_cm}")
        self.d_spk = int(d_spk)
        self.d_cm = int(d_cm)
        self._spk: dict[str, np.ndarray] = {}
        self._cm: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._spk.keys() | self._cm.keys())

    def ids(self) -> list[str]:
        seen = dict.fromkeys(self._spk)
        seen.update(dict.fromkeys(self._cm))
        return list(seen)

    def add(self, utt_id: str, spk=None, cm=None) -> None:
        if spk is None and cm is None:
            raise ValueError(f"{utt_id}: nothing to add")
        if spk is not None:
            vec = self._check(utt_id, spk, self.d_spk, "spk")
            if utt_id in self._spk:
                raise ValueError(f"duplicate speaker embedding for {utt_id!r}")
            self._spk[utt_id] = vec
        if cm is not None:
            vec = self._check(utt_id, cm, self.d_cm, "cm")
            if utt_id in self._cm:
                raise ValueError(f"duplicate CM embedding for {utt_id!r}")
            self._cm[utt_id] = vec

    @staticmethod
    def _check(utt_id, vec, dim, kind) -> np.ndarray:
        arr = np.asarray(vec, dtype=np.float64)
        if arr.shape != (dim,):
            raise ValueError(
                f"{utt_id}: {kind} embedding has shape {arr.shape}, expected ({dim},)"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{utt_id}: {kind} embedding contains non-finite values")
        return arr

    def spk(self, utt_id: str) -> np.ndarray:
        try:
            return self._spk[utt_id]
        except KeyError:
            raise KeyError(f"no speaker embedding stored for {utt_id!r}") from None

    def cm(self, utt_id: str) -> np.ndarray:
        try:
            return self._cm[utt_id]
        except KeyError:
            raise KeyError(f"no CM embedding stored for {utt_id!r}") from None


def save_embeddings(store: EmbeddingStore, path: str, comments: tuple[str, ...] = ()) -> None:
    with atomic_write(path) as fh:
        fh.write(f"#EMB v1 d_spk={store.d_spk} d_cm={store.d_cm}\n")
        for comment in comments:
            fh.write(f"# {comment}\n")
        for utt_id, vec in store._spk.items():
            fh.write(f"{utt_id}\tspk\t{','.join(format_float(x) for x in vec)}\n")
        for utt_id, vec in store._cm.items():
            fh.write(f"{utt_id}\tcm\t{','.join(format_float(x) for x in vec)}\n")


def load_embeddings(path: str) -> EmbeddingStore:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        m = _EMB_HEADER.match(header)
        if not m:
            raise ValueError(f"{path}:1: bad embedding header {header!r}")
        store = EmbeddingStore(int(m.group(1)), int(m.group(2)))
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            utt_id, kind, payload = parts
            if kind not in ("spk", "cm"):
                raise ValueError(f"{path}:{lineno}: unknown embedding kind {kind!r}")
            try:
                vec = np.array([float(x) for x in payload.split(",")])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed float payload") from None
            try:
                store.add(utt_id, spk=vec if kind == "spk" else None,
                          cm=vec if kind == "cm" else None)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return store


def save_protocol(protocol: Protocol, path: str, comments: tuple[str, ...] = ()) -> None:
    with atomic_write(path) as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        for t in protocol.trials:
            fh.write(f"{','.join(t.enroll_ids)}\t{t.test_id}\t{t.label}\n")


def parse_protocol(path: str, partition: str = "eval") -> Protocol:
    trials = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            enroll, test_id, label = parts
            if label not in LABELS:
                raise ValueError(f"{path}:{lineno}: unknown label token {label!r}")
            trials.append(Trial(tuple(enroll.split(",")), test_id, label))
    return Protocol(trials, partition)


def trial_embeddings(store: EmbeddingStore, trial: Trial):
    """Resolve a trial against the store; enrollment embeddings are averaged."""
    from .fusion import TrialEmbeddings

    enroll = np.mean([store.spk(e) for e in trial.enroll_ids], axis=0)
    return TrialEmbeddings(enroll, store.spk(trial.test_id), store.cm(trial.test_id))


# ---------------------------------------------------------------------------
# synthetic workload


@dataclass(frozen=True)
class SynthConfig:
    """Gaussian-cluster generator with independently tunable speaker
    separation (sigma_between vs sigma_within) and spoof detectability
    (spoof_shift in CM space, spoof_spk_noise in speaker space).

    Spoofed utterances mimic the attacked speaker: their speaker embedding
    is drawn around the speaker mean with spread
    sqrt(sigma_within^2 + spoof_spk_noise^2), so spoof_spk_noise = 0 makes
    them distributionally identical to bonafide utterances; their CM
    embedding is displaced spoof_shift away from the bonafide centroid, so
    spoof_shift = 0 hides them from the CM space too.
    """

    train_speakers: int = 50
    dev_speakers: int = 10
    eval_speakers: int = 20
    utterances_per_speaker: int = 6
    d_spk: int = 16
    d_cm: int = 12
    sigma_within: float = 0.055
    sigma_between: float = 1.1
    spoof_shift: float = 1.1
    spoof_spk_noise: float = 0.05
    train_trials_per_label: int = 90
    dev_trials_per_label: int = 60
    eval_trials_per_label: int = 300
    seed: int = 0

    def __post_init__(self):
        for name in ("train_speakers", "dev_speakers", "eval_speakers",
                     "utterances_per_speaker", "d_spk", "d_cm",
                     "train_trials_per_label", "dev_trials_per_label",
                     "eval_trials_per_label"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.sigma_within <= 0 or self.sigma_between <= 0:
            raise ValueError("sigma_within and sigma_between must be > 0")
        if self.spoof_shift < 0 or self.spoof_spk_noise < 0:
            raise ValueError("spoof_shift and spoof_spk_noise must be >= 0")

    def speakers_for(self, partition: str) -> int:
        return {
            "train": self.train_speakers,
            "dev": self.dev_speakers,
            "eval": self.eval_speakers,
        }[partition]

    def trials_for(self, partition: str) -> int:
        return {
            "train": self.train_trials_per_label,
            "dev": self.dev_trials_per_label,
            "eval": self.eval_trials_per_label,
        }[partition]


def generate_synthetic(cfg: SynthConfig) -> tuple[EmbeddingStore, dict[str, Protocol]]:
    """Build (store, {train/dev/eval: Protocol}) with disjoint speaker sets.

    Label counts per partition match the config exactly; everything is
    drawn from one seeded generator, so identical configs reproduce
    identical stores and protocols.
    """
    n_utts = cfg.utterances_per_speaker
    if n_utts < 2:
        raise ValueError("utterances_per_speaker must be >= 2 to form target trials")
    for part in PARTITIONS:
        if cfg.speakers_for(part) < 2:
            raise ValueError(f"{part} needs >= 2 speakers to form nontarget trials")

    rng = np.random.default_rng(cfg.seed)
    store = EmbeddingStore(cfg.d_spk, cfg.d_cm)
    shift_dir = rng.normal(size=cfg.d_cm)
    shift_dir /= np.linalg.norm(shift_dir)
    spoof_spread = math.hypot(cfg.sigma_within, cfg.spoof_spk_noise)

    protocols: dict[str, Protocol] = {}
    n_enroll = min(3, n_utts - 1)
    for part in PARTITIONS:
        speakers = []
        for s in range(cfg.speakers_for(part)):
            sid = f"{part}-spk{s:04d}"
            mean = rng.normal(size=cfg.d_spk)
            mean *= cfg.sigma_between / np.linalg.norm(mean)
            utts = []
            for u in range(n_utts):
                uid = f"{sid}-u{u:02d}"
                store.add(
                    uid,
                    spk=mean + cfg.sigma_within * rng.normal(size=cfg.d_spk),
                    cm=cfg.sigma_within * rng.normal(size=cfg.d_cm),
                )
                utts.append(uid)
            speakers.append((sid, mean, tuple(utts[:n_enroll]), utts[n_enroll:]))

        n_spk = len(speakers)
        n_trials = cfg.trials_for(part)
        trials = []
        for _ in range(n_trials):
            _, _, enroll, tests = speakers[rng.integers(n_spk)]
            trials.append(Trial(enroll, tests[rng.integers(len(tests))], "target"))
        for _ in range(n_trials):
            i = rng.integers(n_spk)
            j = (i + 1 + rng.integers(n_spk - 1)) % n_spk
            _, _, enroll, _ = speakers[i]
            _, _, _, tests = speakers[j]
            trials.append(Trial(enroll, tests[rng.integers(len(tests))], "nontarget"))
        spoof_counter = [0] * n_spk
        for _ in range(n_trials):
            i = rng.integers(n_spk)
            sid, mean, enroll, _ = speakers[i]
            uid = f"{sid}-spoof{spoof_counter[i]:03d}"
            spoof_counter[i] += 1
            store.add(
                uid,
                spk=mean + spoof_spread * rng.normal(size=cfg.d_spk),
                cm=cfg.spoof_shift * shift_dir + cfg.sigma_within * rng.normal(size=cfg.d_cm),
            )
            trials.append(Trial(enroll, uid, "spoof"))
        protocols[part] = Protocol(trials, part)

    return store, protocols
