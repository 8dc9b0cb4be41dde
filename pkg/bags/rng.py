"""Named, independently seeded random streams derived from one run seed"""
import zlib
from typing import Dict

import numpy as np


class RngStreams:
    """
    One numpy Generator per subsystem name ("views", "densify", "bpn", ...)

    Each stream is spawned from the run seed and a CRC of its name, so adding
    a stream never shifts the sequence of another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            sequence = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode("utf-8")),))
            self._streams[name] = np.random.Generator(np.random.PCG64(sequence))
        return self._streams[name]

    def state(self) -> Dict[str, dict]:
        return {name: gen.bit_generator.state for name, gen in self._streams.items()}

    def load_state(self, states: Dict[str, dict]) -> None:
        for name, st in states.items():
            self.get(name).bit_generator.state = st
