"""
Closed vocabulary of the synthetic referring expressions.
"""

from typing import Dict, List, Sequence

from ..config.run_config import DatasetConfig
from ..errors import DatasetError

SHAPE_WORDS = ("square", "circle", "triangle", "star", "diamond", "cross", "ring", "hexagon")
COLOR_WORDS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black")
SIZE_WORDS = ("small", "big")
RELATION_WORDS = ("left", "right")

PAD = "<pad>"
ARTICLE = "the"
OF = "of"


class Vocabulary:
    """Word <-> id mapping for one dataset configuration.

    Layout: pad, "the", shape words, color words, size words, "left",
    "right", "of".
    """

    def __init__(self, config: DatasetConfig):
        if config.n_shapes > len(SHAPE_WORDS):
            raise DatasetError(f"n_shapes ({config.n_shapes}) exceeds {len(SHAPE_WORDS)} shape words")
        if config.n_colors > len(COLOR_WORDS):
            raise DatasetError(f"n_colors ({config.n_colors}) exceeds {len(COLOR_WORDS)} color words")
        self.shapes = list(SHAPE_WORDS[: config.n_shapes])
        self.colors = list(COLOR_WORDS[: config.n_colors])
        self.words: List[str] = (
            [PAD, ARTICLE] + self.shapes + self.colors + list(SIZE_WORDS) + list(RELATION_WORDS) + [OF]
        )
        self.index: Dict[str, int] = {w: i for i, w in enumerate(self.words)}
        if len(self.words) != config.vocab_size:
            raise DatasetError(
                f"vocabulary has {len(self.words)} words but the configuration expects {config.vocab_size}"
            )

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, words: Sequence[str]) -> List[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise DatasetError(f"word {e.args[0]!r} is not in the vocabulary") from e

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.words[i] for i in ids]
