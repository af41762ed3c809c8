"""Synthetic multi-center EHR generator with controllable heterogeneity.

Records are built around latent condition clusters: each cluster owns a
handful of related diagnoses, so diagnoses co-occur and masked codes are
predictable from their visible neighbours. Procedures follow the sampled
diagnoses through a shared affinity table. Medications come from per-cluster
protocol sets plus per-procedure contributions, blurred by label noise, so
recommending well requires recognizing a record's underlying clusters, and
the cluster structure itself is only learnable from code co-occurrence at
pooled-data scale.

The heterogeneity knob eta in [0, 1] controls how far centers drift apart:
each center mixes the global cluster distribution with a private one at
weight eta, rewires a share of the procedure affinities, substitutes some
cluster protocols, and applies its own medication bans and house favorites,
all scaled by eta. eta=0 makes centers identically distributed; larger eta
monotonically pushes the centers' prescription distributions apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MultiCenterDataset, Record, Vocabularies, derived_rng

_GLOBAL_TAG = 3
_CENTER_TAG = 5

# fraction of diagnosis draws that ignore the sampled clusters (noise floor)
_OFF_CLUSTER_RATE = 0.15
# per-medication label noise, independent of eta
_MED_DROP_RATE = 0.18
_MED_ADD_RATE = 0.05


@dataclass
class GeneratorConfig:
    n_centers: int = 6
    records_per_center: tuple[int, int] = (200, 1600)
    n_diagnoses: int = 600
    n_procedures: int = 200
    n_medications: int = 160
    n_clusters: int = 50
    heterogeneity: float = 0.6
    mean_diagnoses: float = 4.0
    mean_procedures: float = 7.0
    mean_medications: float = 12.0
    seed: int = 42

    def validate(self) -> None:
        if self.n_centers < 1:
            raise ValueError("n_centers must be positive")
        lo, hi = self.records_per_center
        if lo < 1 or hi < lo:
            raise ValueError("records_per_center must be a positive (lo, hi) range")
        for name in ("n_diagnoses", "n_procedures", "n_medications"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be at least 2")
        if not (1 <= self.n_clusters <= self.n_diagnoses):
            raise ValueError("n_clusters must lie in [1, n_diagnoses]")
        if not (0.0 <= self.heterogeneity <= 1.0):
            raise ValueError("heterogeneity must lie in [0, 1]")
        for name in ("mean_diagnoses", "mean_procedures", "mean_medications"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def center_record_counts(cfg: GeneratorConfig) -> np.ndarray:
    """Center sizes spread evenly across the configured range."""
    lo, hi = cfg.records_per_center
    if cfg.n_centers == 1:
        return np.array([lo], dtype=int)
    return np.round(np.linspace(lo, hi, cfg.n_centers)).astype(int)


class _SharedWorld:
    """Global structures every center perturbs: condition clusters, code
    distributions and the diagnosis/procedure -> medication mappings."""

    def __init__(self, cfg: GeneratorConfig):
        rng = derived_rng(cfg.seed, _GLOBAL_TAG)
        # each diagnosis belongs to one cluster; clusters partition the codes
        owners = np.sort(rng.integers(cfg.n_clusters, size=cfg.n_diagnoses))
        owners[:cfg.n_clusters] = np.arange(cfg.n_clusters)  # no empty cluster
        self.cluster_members = [np.flatnonzero(owners == t)
                                for t in range(cfg.n_clusters)]
        self.cluster_probs = rng.dirichlet(np.full(cfg.n_clusters, 2.0))
        # within-cluster diagnosis weights (some codes are more common)
        self.member_weights = [rng.dirichlet(np.full(len(m), 2.0))
                               for m in self.cluster_members]
        self.diag_marginal = np.zeros(cfg.n_diagnoses)
        for t in range(cfg.n_clusters):
            self.diag_marginal[self.cluster_members[t]] += \
                self.cluster_probs[t] * self.member_weights[t]
        self.diag_marginal /= self.diag_marginal.sum()

        procs_per_diag = max(1, round(cfg.mean_procedures / max(cfg.mean_diagnoses, 1.0)) + 1)
        meds_per_cluster = max(1, round(0.55 * cfg.mean_medications / 1.4))
        meds_per_proc = max(1, round(0.45 * cfg.mean_medications / cfg.mean_procedures))
        self.diag_to_procs = [rng.choice(cfg.n_procedures,
                                         size=min(procs_per_diag, cfg.n_procedures),
                                         replace=False)
                              for _ in range(cfg.n_diagnoses)]
        self.cluster_to_meds = [rng.choice(cfg.n_medications,
                                           size=min(meds_per_cluster, cfg.n_medications),
                                           replace=False)
                                for _ in range(cfg.n_clusters)]
        self.proc_to_meds = [rng.choice(cfg.n_medications,
                                        size=min(meds_per_proc, cfg.n_medications),
                                        replace=False)
                             for _ in range(cfg.n_procedures)]


class _CenterProfile:
    """One center's perturbed view of the shared world."""

    def __init__(self, cfg: GeneratorConfig, world: _SharedWorld, index: int):
        eta = cfg.heterogeneity
        self.rng = derived_rng(cfg.seed, _CENTER_TAG, index)
        rng = self.rng
        # case-mix drift is kept milder than the prescription-side drift so
        # pooled pretraining still covers every center's case distribution
        mix = 0.3 * eta
        private = rng.dirichlet(np.full(cfg.n_clusters, 2.0))
        self.cluster_probs = (1.0 - mix) * world.cluster_probs + mix * private

        self.diag_to_procs = []
        for d in range(cfg.n_diagnoses):
            if rng.random() < 0.25 * eta:
                self.diag_to_procs.append(rng.choice(
                    cfg.n_procedures, size=len(world.diag_to_procs[d]),
                    replace=False))
            else:
                self.diag_to_procs.append(world.diag_to_procs[d])

        self.cluster_to_meds = []
        for t in range(cfg.n_clusters):
            if rng.random() < 0.4 * eta:
                self.cluster_to_meds.append(rng.choice(
                    cfg.n_medications, size=len(world.cluster_to_meds[t]),
                    replace=False))
            else:
                self.cluster_to_meds.append(world.cluster_to_meds[t])

        self.banned = rng.random(cfg.n_medications) < 0.5 * eta
        n_favorites = round(0.12 * eta * cfg.n_medications)
        self.favorites = (rng.choice(cfg.n_medications, size=n_favorites,
                                     replace=False)
                          if n_favorites else np.empty(0, dtype=int))

    def sample_record(self, cfg: GeneratorConfig, world: _SharedWorld,
                      center_id: str) -> Record:
        rng = self.rng
        n_diag = int(np.clip(rng.poisson(max(cfg.mean_diagnoses - 1.0, 0.0)) + 1,
                             1, cfg.n_diagnoses))
        # most draws come from one or two sampled condition clusters
        n_clusters = 1 if rng.random() < 0.7 else 2
        clusters = rng.choice(cfg.n_clusters, size=n_clusters, replace=False,
                              p=self.cluster_probs)
        diags: set[int] = set()
        for _ in range(n_diag):
            if rng.random() < _OFF_CLUSTER_RATE:
                diags.add(int(rng.choice(cfg.n_diagnoses, p=world.diag_marginal)))
            else:
                t = int(clusters[0] if n_clusters == 1 else rng.choice(clusters))
                d = rng.choice(world.cluster_members[t], p=world.member_weights[t])
                diags.add(int(d))
        diag_list = sorted(diags)

        n_proc = int(min(rng.poisson(cfg.mean_procedures), cfg.n_procedures))
        pool = sorted({int(p) for d in diag_list for p in self.diag_to_procs[d]})
        procs: list[int] = []
        if n_proc and pool:
            take = min(n_proc, len(pool))
            procs = [int(p) for p in rng.choice(pool, size=take, replace=False)]
            for i in range(len(procs)):  # occasional off-affinity procedure
                if rng.random() < 0.1:
                    procs[i] = int(rng.integers(cfg.n_procedures))

        meds = {int(m) for t in clusters for m in self.cluster_to_meds[int(t)]}
        meds.update(int(m) for p in procs for m in world.proc_to_meds[p])
        meds = {m for m in meds if not self.banned[m]}
        for fav in self.favorites:
            if rng.random() < 0.8:
                meds.add(int(fav))
        # label noise: prescriptions are not a deterministic function of codes
        meds = {m for m in meds if rng.random() >= _MED_DROP_RATE}
        if rng.random() < _MED_ADD_RATE * cfg.mean_medications:
            meds.add(int(rng.integers(cfg.n_medications)))
        if not meds:  # keep one anchored medication
            meds = {int(world.cluster_to_meds[int(clusters[0])][0])}
        return Record(center_id, tuple(diag_list), tuple(sorted(set(procs))),
                      tuple(sorted(meds)))


def generate(cfg: GeneratorConfig) -> MultiCenterDataset:
    """Sample a full multi-center dataset from the config."""
    cfg.validate()
    vocabs = Vocabularies(
        tuple(f"D{i:04d}" for i in range(cfg.n_diagnoses)),
        tuple(f"P{i:04d}" for i in range(cfg.n_procedures)),
        tuple(f"M{i:04d}" for i in range(cfg.n_medications)),
    )
    world = _SharedWorld(cfg)
    counts = center_record_counts(cfg)
    digits = max(len(str(cfg.n_centers - 1)), 1)
    records_by_center: dict[str, tuple[Record, ...]] = {}
    for h in range(cfg.n_centers):
        center_id = f"C{h:0{digits}d}"
        profile = _CenterProfile(cfg, world, h)
        records_by_center[center_id] = tuple(
            profile.sample_record(cfg, world, center_id) for _ in range(counts[h]))
    return MultiCenterDataset(vocabs, records_by_center, split_seed=cfg.seed)


def dataset_summary(dataset: MultiCenterDataset) -> list[dict]:
    """Per-center record counts and mean set sizes (one row per center)."""
    rows = []
    for center in dataset.centers:
        records = dataset.records_by_center[center]
        rows.append({
            "center": center,
            "records": len(records),
            "mean_diagnoses": float(np.mean([len(r.diagnoses) for r in records])),
            "mean_procedures": float(np.mean([len(r.procedures) for r in records])),
            "mean_medications": float(np.mean([len(r.medications) for r in records])),
        })
    return rows
