from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..errors import TextReactError
from .records import ReactionRecord

logger = logging.getLogger(__name__)

# year windows used for the chronological splits
RCR_TIME_SPLIT = {"train_before": 2015, "valid_years": (2015,), "test_years": (2016,)}
RETRO_TIME_SPLIT = {"train_before": 2012, "valid_years": (2012, 2013), "test_years": (2014, 2015)}


class EmptyDataset(TextReactError, ValueError):
    pass


class EmptySplitPart(TextReactError, ValueError):
    pass


@dataclass
class DatasetSplit:
    train: list[str]
    valid: list[str]
    test: list[str]
    dropped: int = 0

    def parts(self) -> dict[str, list[str]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def to_json(self) -> str:
        return json.dumps(self.parts())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        split = cls(list(obj["train"]), list(obj["valid"]), list(obj["test"]))
        seen = set()
        for part in split.parts().values():
            overlap = seen.intersection(part)
            if overlap:
                raise ValueError(f"split parts overlap on {sorted(overlap)[:5]}")
            seen.update(part)
        return split


def make_random_split(ids: Sequence[str], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    if not ids:
        raise EmptyDataset("cannot split an empty dataset")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(np.floor(ratios[0] * len(ids) + 1e-9))
    n_valid = int(np.floor(ratios[1] * len(ids) + 1e-9))
    return DatasetSplit(
        shuffled[:n_train], shuffled[n_train : n_train + n_valid], shuffled[n_train + n_valid :]
    )


def make_time_split(
    records: Iterable[ReactionRecord],
    train_before: int,
    valid_years: Sequence[int],
    test_years: Sequence[int],
) -> DatasetSplit:
    valid_years, test_years = set(valid_years), set(test_years)
    if not valid_years or not test_years or min(valid_years) < train_before or max(valid_years) >= min(test_years):
        raise ValueError("need train_before <= valid years < test years")
    split = DatasetSplit([], [], [])
    for r in records:
        if r.year < train_before:
            split.train.append(r.id)
        elif r.year in valid_years:
            split.valid.append(r.id)
        elif r.year in test_years:
            split.test.append(r.id)
        else:
            split.dropped += 1
    for name, part in split.parts().items():
        if not part:
            raise EmptySplitPart(f"time split leaves {name} empty")
    if split.dropped:
        logger.info("time split dropped %d records outside all year windows", split.dropped)
    return split
