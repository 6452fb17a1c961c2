import numpy as np
import pytest

from dpsm import nncore
from dpsm.corpus import PoiRecord
from dpsm.features import EncodedTexts, PoiFeatures
from dpsm.textrep import TextEncoder, build_vocab
from dpsm.towers import ModelConfig, init_params

BACKENDS = nncore.available_backends()

TINY_POIS = [
    PoiRecord("p0", "甲乙 丙丁", "东区 南路 1号", 5.0),
    PoiRecord("p1", "戊己 庚辛", "西区 北街 22号", 3.0),
    PoiRecord("p2", "kfc 甲丙", "东区 北街 3号", 2.0),
    PoiRecord("p3", "乙丁 戊", "南区 南路 14号", 1.0),
    PoiRecord("p4", "庚 辛甲", "北区 中路 5号", 1.0),
]
TINY_QUERIES = ["甲乙丙", "戊a", "庚辛", "南路1", "kf"]


@pytest.fixture(params=BACKENDS)
def kern(request):
    return nncore.get_backend(request.param)


@pytest.fixture
def tiny_vocab():
    texts = [t for p in TINY_POIS for t in (p.name, p.address)] + TINY_QUERIES
    return build_vocab(texts, 40, 20)


@pytest.fixture
def tiny_encoder(tiny_vocab):
    return TextEncoder(tiny_vocab, max_letters=8, max_words=4)


@pytest.fixture
def tiny_config(tiny_vocab):
    return ModelConfig(vocab_size=tiny_vocab.size, embed_dim=4, conv_channels=3, hidden_dim=6, out_dim=5)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0)


@pytest.fixture
def tiny_pois(tiny_encoder):
    return PoiFeatures(TINY_POIS, tiny_encoder)


@pytest.fixture
def tiny_queries(tiny_encoder):
    return EncodedTexts(TINY_QUERIES, tiny_encoder)


def jitter(params, seed, scale=0.3):
    """Move params off their init so relu units and outputs are non-degenerate."""
    rng = np.random.default_rng(seed)
    for p in params:
        p.value[...] += rng.normal(0, scale, p.shape)
    return params


class Trained:
    """A small model trained once per session on a seeded synthetic corpus."""

    def __init__(self):
        from dpsm.cli import make_vocab
        from dpsm.corpus import gen_synthetic
        from dpsm.training import TrainConfig, train

        self.corpus = gen_synthetic(seed=3, n_pois=300, n_queries=3000)
        self.vocab = make_vocab(self.corpus.pois, [c.query for c in self.corpus.clicks], 400, 800)
        self.config = ModelConfig(vocab_size=self.vocab.size, embed_dim=16, conv_channels=32,
                                  hidden_dim=32, out_dim=16)
        self.encoder = TextEncoder(self.vocab, max_letters=self.config.max_letters,
                                   max_words=self.config.max_words)
        self.pois = PoiFeatures(self.corpus.pois, self.encoder)
        self.train_config = TrainConfig(gamma=20.0, learning_rate=3e-3, epochs=3, seed=1,
                                        popularity_exponent=0.5)
        dataset = [(c.query, c.poi_id) for c in self.corpus.clicks]
        self.result = train(dataset, self.pois, self.encoder, self.config, self.train_config)
        self.params = self.result.params


@pytest.fixture(scope="session")
def trained():
    return Trained()


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
