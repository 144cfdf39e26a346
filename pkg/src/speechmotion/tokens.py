"""Lower-cased character-level tokenization with an explicit word boundary."""

import numpy as np

PAD_ID = 0
BOUNDARY_ID = 1
_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789'.,!?-"
_CHAR_TO_ID = {c: i + 2 for i, c in enumerate(_CHARS)}
_ID_TO_CHAR = {i: c for c, i in _CHAR_TO_ID.items()}

VOCAB_SIZE = 2 + len(_CHARS)


def normalize_text(text: str) -> str:
    """Lower-case and collapse runs of whitespace to single spaces."""
    return " ".join(text.lower().split())


def tokenize(text: str) -> np.ndarray:
    """Map text to symbol ids; unknown characters are dropped.

    Words are separated by a single boundary symbol; there is no leading or
    trailing boundary. Returns an empty array when nothing survives
    normalization.
    """
    ids: list[int] = []
    for word in normalize_text(text).split(" "):
        chars = [_CHAR_TO_ID[c] for c in word if c in _CHAR_TO_ID]
        if not chars:
            continue
        if ids:
            ids.append(BOUNDARY_ID)
        ids.extend(chars)
    return np.asarray(ids, dtype=np.int64)


def detokenize(ids) -> str:
    """Inverse of tokenize for debugging; pads are skipped."""
    out = []
    for i in ids:
        i = int(i)
        if i == BOUNDARY_ID:
            out.append(" ")
        elif i in _ID_TO_CHAR:
            out.append(_ID_TO_CHAR[i])
    return "".join(out)
