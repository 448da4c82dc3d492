"""Local knowledge store with Okapi BM25 ranking for reward-design prompts."""

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

logger = logging.getLogger(__name__)

CORPUS_DIR = Path(__file__).resolve().parent / "knowledge"

EXCERPT_CHARS = 600


class DuplicateDocumentError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str


@dataclass(frozen=True)
class Snippet:
    doc_id: str
    score: float
    excerpt: str


def tokenize(text):
    """Lowercase alphanumeric runs."""
    return re.findall(r"[a-z0-9]+", text.lower())


@dataclass(frozen=True)
class KnowledgeStore:
    """Immutable BM25 index over a fixed document list.

    `term_freqs[i]` holds the term counts of document i (title and body),
    `doc_freq` the number of documents containing each term.
    """
    documents: Tuple[Document, ...]
    term_freqs: Tuple[Dict[str, int], ...]
    doc_lens: Tuple[int, ...]
    doc_freq: Dict[str, int]
    avgdl: float
    k1: float
    b: float

    def __len__(self):
        return len(self.documents)

    def idf(self, term):
        n = self.doc_freq.get(term, 0)
        return math.log(1 + (len(self.documents) - n + 0.5) / (n + 0.5))

    def score(self, index, query_terms):
        tf = self.term_freqs[index]
        norm = self.k1 * (1 - self.b + self.b * self.doc_lens[index] / self.avgdl)
        total = 0.0
        for term in query_terms:
            f = tf.get(term, 0)
            if f:
                total += self.idf(term) * f * (self.k1 + 1) / (f + norm)
        return total


def index_store(documents: Sequence[Document], k1=1.2, b=0.75):
    """Build the BM25 index; doc_ids must be unique."""
    seen = set()
    for doc in documents:
        if doc.doc_id in seen:
            raise DuplicateDocumentError("duplicate doc_id {!r}".format(doc.doc_id))
        seen.add(doc.doc_id)

    term_freqs = []
    doc_freq = Counter()
    for doc in documents:
        tf = Counter(tokenize(doc.title + "\n" + doc.body))
        term_freqs.append(dict(tf))
        doc_freq.update(tf.keys())
    doc_lens = tuple(sum(tf.values()) for tf in term_freqs)
    avgdl = sum(doc_lens) / len(doc_lens) if doc_lens else 0.0
    return KnowledgeStore(documents=tuple(documents),
                          term_freqs=tuple(term_freqs),
                          doc_lens=doc_lens,
                          doc_freq=dict(doc_freq),
                          avgdl=avgdl or 1.0,
                          k1=k1,
                          b=b)


def _excerpt(body):
    body = " ".join(body.split())
    if len(body) <= EXCERPT_CHARS:
        return body
    return body[:EXCERPT_CHARS].rsplit(" ", 1)[0] + " ..."


def retrieve(store, query, top_k) -> List[Snippet]:
    """Documents matching `query`, best first, ties by doc_id."""
    assert top_k >= 1, "top_k must be at least 1"
    terms = tokenize(query)
    scored = []
    for i, doc in enumerate(store.documents):
        s = store.score(i, terms)
        if s > 0:
            scored.append((-s, doc.doc_id, i))
    scored.sort()
    return [Snippet(doc_id=store.documents[i].doc_id, score=-neg,
                    excerpt=_excerpt(store.documents[i].body))
            for neg, _, i in scored[:top_k]]


def load_corpus(directory=None):
    """Read `*.txt` documents; the first line is the title, the stem the id."""
    directory = Path(directory) if directory is not None else CORPUS_DIR
    documents = []
    for path in sorted(directory.glob("*.txt")):
        title, _, body = path.read_text(encoding="utf-8").partition("\n")
        documents.append(Document(doc_id=path.stem, title=title.strip(), body=body.strip()))
    logger.debug("loaded %d knowledge documents from %s", len(documents), directory)
    return documents


def default_store():
    return index_store(load_corpus())
