"""Deterministic without-replacement batch sampling over the training pool.

Each epoch is an independent seeded shuffle of the instance ids; batches are
consecutive slices. State is just (epoch, cursor), so a resumed run continues
the exact same stream.
"""

from __future__ import annotations

import random
from typing import Sequence

from .errors import ConfigurationError


class EpochSampler:
    def __init__(
        self, ids: Sequence[str], seed: int, epoch: int = 0, cursor: int = 0
    ) -> None:
        if not ids:
            raise ConfigurationError("cannot sample from an empty pool")
        self.ids = list(ids)
        self.seed = seed
        self.epoch = epoch
        self.cursor = cursor
        self._order = self.epoch_order(epoch)

    def epoch_order(self, epoch: int) -> list[str]:
        order = list(self.ids)
        random.Random(f"{self.seed}:{epoch}").shuffle(order)
        return order

    @property
    def state(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor}

    def next_batch(self, size: int) -> list[str]:
        """Next ``size`` ids; reshuffles into a new epoch when the pool runs out.

        A batch that straddles an epoch boundary skips ids it already holds,
        so no batch contains duplicates.
        """
        if size > len(self.ids):
            raise ConfigurationError(
                f"batch size {size} exceeds the pool of {len(self.ids)} instances"
            )
        batch: list[str] = []
        while len(batch) < size:
            if self.cursor >= len(self._order):
                self.epoch += 1
                self.cursor = 0
                self._order = self.epoch_order(self.epoch)
            candidate = self._order[self.cursor]
            self.cursor += 1
            if candidate not in batch:
                batch.append(candidate)
        return batch
