"""Pre-encoded text corpora and batch assembly for the towers."""

from __future__ import annotations

import numpy as np

from .textrep import LETTER, WORD, TextEncoder
from .towers import POI, QUERY, FieldBatch, ModelConfig, _min_width


class EncodedTexts:
    """Letter and word ids of N texts, stored right-padded to the max lengths."""

    def __init__(self, texts, encoder: TextEncoder):
        n = len(texts)
        self.ids = {LETTER: np.zeros((n, encoder.max_letters), dtype=np.int64),
                    WORD: np.zeros((n, encoder.max_words), dtype=np.int64)}
        self.lengths = {LETTER: np.zeros(n, dtype=np.int64), WORD: np.zeros(n, dtype=np.int64)}
        for i, text in enumerate(texts):
            for seq in encoder.encode(text):
                g = seq.granularity
                self.ids[g][i, :len(seq)] = seq.ids
                self.lengths[g][i] = len(seq)

    def __len__(self):
        return self.lengths[LETTER].shape[0]

    def batch(self, rows, granularity, min_width=1) -> FieldBatch:
        rows = np.asarray(rows, dtype=np.int64)
        lengths = self.lengths[granularity][rows]
        T = max(int(lengths.max(initial=0)), min_width)
        ids = self.ids[granularity][rows, :T]
        if ids.shape[1] < T:
            ids = np.pad(ids, ((0, 0), (0, T - ids.shape[1])))
        return FieldBatch(ids, lengths, granularity)


def query_batches(config: ModelConfig, queries: EncodedTexts, rows):
    w = _min_width(config)
    return [queries.batch(rows, g, w) for _, g in config.tower_fields(QUERY)]


def poi_batches(config: ModelConfig, names: EncodedTexts, addresses: EncodedTexts, rows):
    w = _min_width(config)
    src = {"name": names, "address": addresses}
    return [src[f].batch(rows, g, w) for f, g in config.tower_fields(POI)]


class PoiFeatures:
    """Encoded name/address fields for a POI database, addressable by row."""

    def __init__(self, pois, encoder: TextEncoder):
        self.ids = [p.poi_id for p in pois]
        self.row = {pid: i for i, pid in enumerate(self.ids)}
        self.popularity = np.array([p.popularity for p in pois], dtype=np.float64)
        self.names = EncodedTexts([p.name for p in pois], encoder)
        self.addresses = EncodedTexts([p.address for p in pois], encoder)

    def __len__(self):
        return len(self.ids)

    def batches(self, config, rows):
        return poi_batches(config, self.names, self.addresses, rows)
