import numpy as np
import pytest

from medrec.data import MultiCenterDataset, Record, Vocabularies
from medrec.encoder import EncoderConfig
from medrec.generator import GeneratorConfig, generate
from medrec.pretrain import PretrainConfig
from medrec.tune import TuneConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_encoder_cfg():
    return EncoderConfig(embed_dim=8, n_layers=2, n_heads=2, max_len=20)


@pytest.fixture
def tiny_vocabs():
    return Vocabularies(
        [f"D{i}" for i in range(12)],
        [f"P{i}" for i in range(10)],
        [f"M{i}" for i in range(8)],
    )


@pytest.fixture
def tiny_dataset():
    """Two small centers with learnable structure, ~40 records each."""
    cfg = GeneratorConfig(n_centers=2, records_per_center=(40, 40),
                          n_diagnoses=12, n_procedures=10, n_medications=8,
                          n_clusters=4, heterogeneity=0.5, mean_diagnoses=3.0,
                          mean_procedures=3.0, mean_medications=4.0, seed=7)
    return generate(cfg)


@pytest.fixture
def tiny_pretrain_cfg():
    return PretrainConfig(batch_size=8, max_epochs=2, patience=2, seed=11)


@pytest.fixture
def tiny_tune_cfg():
    return TuneConfig(batch_size=8, max_epochs=2, patience=2, seed=11)


def build_dataset(records_by_center: dict, vocabs: Vocabularies,
                  seed: int = 0) -> MultiCenterDataset:
    grouped = {c: tuple(rs) for c, rs in records_by_center.items()}
    return MultiCenterDataset(vocabs, grouped, split_seed=seed)


def simple_record(center="C0", diag=(0, 1), proc=(0,), med=(0, 1)) -> Record:
    return Record(center, tuple(diag), tuple(proc), tuple(med))
