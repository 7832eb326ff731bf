"""Turning joint-space embeddings into text labels."""
from __future__ import annotations

from dataclasses import dataclass
from importlib.metadata import entry_points
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from . import tensorio
from .encoders import JointEncoder, SentenceEncoder


class DecoderUnavailable(RuntimeError):
    pass


def unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding has non-finite entries")
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("embedding has degenerate (zero) norm")
    return v / n


def cossim(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(unit(a) @ unit(b), -1.0, 1.0))


@dataclass(frozen=True)
class VocabularyBank:
    phrases: tuple[str, ...]
    embeddings: np.ndarray  # (n, d), rows unit-norm
    source: str = ""

    def __post_init__(self):
        if len(set(self.phrases)) != len(self.phrases):
            raise ValueError("bank phrases must be unique")
        if self.embeddings.shape[0] != len(self.phrases):
            raise ValueError("one embedding per phrase required")

    def __len__(self):
        return len(self.phrases)

    def save(self, path: str | Path) -> None:
        """Write ``<path>`` (ZGTR, keys text/<phrase>) and ``<path>.txt`` (phrase list)."""
        path = Path(path)
        tensorio.save(path, {f"text/{p}": e for p, e in zip(self.phrases, self.embeddings)})
        Path(str(path) + ".txt").write_text("".join(p + "\n" for p in self.phrases), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "VocabularyBank":
        path = Path(path)
        tensors = tensorio.load(path)
        phrases = Path(str(path) + ".txt").read_text(encoding="utf-8").splitlines()
        emb = np.stack([unit(tensors[f"text/{p}"]) for p in phrases])
        return cls(tuple(phrases), emb, source=str(path))


def read_phrase_list(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def build_bank(phrases: list[str], encoder: JointEncoder, source: str = "") -> VocabularyBank:
    cleaned = [p.strip() for p in phrases]
    if not cleaned or any(not p for p in cleaned):
        raise ValueError("phrase list is empty or has blank entries")
    seen = set()
    for p in cleaned:
        if p in seen:
            raise ValueError(f"duplicate phrase {p!r}")
        seen.add(p)
    emb = np.stack([unit(encoder.embed_text(p)) for p in cleaned])
    return VocabularyBank(tuple(cleaned), emb, source=source)


def retrieve_top_k(embedding: np.ndarray, bank: VocabularyBank, k: int) -> list[tuple[str, float]]:
    if len(bank) == 0:
        raise ValueError("vocabulary bank is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = bank.embeddings @ unit(embedding)
    order = np.argsort(-scores, kind="stable")[:k]
    return [(bank.phrases[i], float(scores[i])) for i in order]


@dataclass(frozen=True)
class TextLabel:
    text: str
    joint: np.ndarray      # joint-space text embedding
    sentence: np.ndarray   # sentence-similarity-space embedding
    decoder: str
    score: float

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("label text must be non-empty")


class Decoder(Protocol):
    name: str

    def caption(self, embedding: np.ndarray) -> tuple[str, float]: ...


class RetrievalDecoder:
    name = "retrieval"

    def __init__(self, bank: VocabularyBank):
        self.bank = bank

    def caption(self, embedding: np.ndarray) -> tuple[str, float]:
        return retrieve_top_k(embedding, self.bank, 1)[0]


def load_generative_decoder(**kwargs) -> Decoder:
    """Look up a generative captioner registered under the ``zeroguide.decoders`` entry-point group."""
    for ep in entry_points(group="zeroguide.decoders"):
        if ep.name == "generative":
            return ep.load()(**kwargs)
    raise DecoderUnavailable(
        "no generative decoder installed (register one under the 'zeroguide.decoders' entry point)")


def decode(embedding: np.ndarray, decoder: Decoder, encoder: JointEncoder,
           sentence_encoder: Optional[SentenceEncoder] = None) -> TextLabel:
    text, score = decoder.caption(unit(embedding))
    sentence = sentence_encoder.embed_sentence_pairwise(text) if sentence_encoder is not None else np.zeros(0)
    return TextLabel(text=text, joint=encoder.embed_text(text), sentence=sentence,
                     decoder=decoder.name, score=float(score))


@dataclass
class LabeledSegment:
    node_id: int
    mask: np.ndarray          # H x W bool
    embedding: np.ndarray     # joint-space segment embedding
    label: TextLabel

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))
