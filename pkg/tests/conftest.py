import numpy as np
import pytest

from metafew.corpus import PipelineConfig, build_index, ingest_corpus
from metafew.encoder import EncoderConfig
from metafew.fixtures import make_planted_corpus
from metafew.meta import GeneratorConfig, MetaTrainConfig, init_model, meta_train
from metafew.tasks import EpisodeSampler, SamplerConfig


@pytest.fixture(scope="session")
def planted_store():
    text = make_planted_corpus(n_families=5, sentences_per_family=20, seed=0)
    return ingest_corpus(text, PipelineConfig(max_seq_len=16, line_mode=True))


@pytest.fixture(scope="session")
def trained_small(planted_store):
    """A small model meta-trained enough to beat chance; shared by the
    evaluation and analysis tests (about half a minute once per session)."""
    store = planted_store
    index = build_index(store, 15)
    sampler = EpisodeSampler(
        store, index, SamplerConfig(n_way_choices=(2,), k_support=4, q_query=2)
    )
    enc_cfg = EncoderConfig(
        vocab_size=store.vocab_size, model_dim=16, ff_dim=32, n_layers=2,
        n_heads=2, max_seq_len=16, dropout=0.0,
    )
    model = init_model(enc_cfg, GeneratorConfig(model_dim=16, gen_dim=8), 17, outer_lr=0.03)
    cfg = MetaTrainConfig(
        n_episodes=400, tasks_per_batch=4, adaptation_steps=3, outer_lr=0.03,
        inner_batch_size=8, seed=11,
    )
    trained, rows = meta_train(model, cfg, sampler=sampler)
    return {"model": trained, "store": store, "sampler": sampler, "rows": rows}
