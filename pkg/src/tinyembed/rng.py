"""Named deterministic random streams.

Every source of randomness in the package (parameter init, data shuffling,
dropout masks, ...) draws from its own named stream so that adding a new
consumer never perturbs the draws seen by existing ones.  Streams are
derived from a single root seed plus a stable hash of the stream name, and
their internal state can be captured and restored exactly, which is what
makes checkpoint resume bit-identical.
"""

import hashlib
import json

import numpy as np


def _name_key(name):
    """Map a stream name to a stable 64-bit integer via sha256."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStreams:
    """A hub of independent, named PCG64 generators under one root seed.

    Streams are created lazily on first access and cached, so repeated
    ``stream(name)`` calls return the same generator object (and therefore
    continue its sequence rather than restarting it).
    """

    def __init__(self, root_seed):
        if not isinstance(root_seed, (int, np.integer)) or isinstance(root_seed, bool):
            raise TypeError(f"root_seed must be an int, got {type(root_seed).__name__}")
        if root_seed < 0:
            raise ValueError(f"root_seed must be non-negative, got {root_seed}")
        self.root_seed = int(root_seed)
        self._streams = {}

    def stream(self, name):
        """Return the generator for ``name``, creating it on first use."""
        if name not in self._streams:
            seq = np.random.SeedSequence([self.root_seed, _name_key(name)])
            self._streams[name] = np.random.Generator(np.random.PCG64(seq))
        return self._streams[name]

    def state_dict(self):
        """Capture the exact state of every stream touched so far.

        The result is JSON-serializable: bit generator states are dicts of
        ints/strings as produced by numpy.
        """
        states = {}
        for name, gen in self._streams.items():
            states[name] = gen.bit_generator.state
        return {"root_seed": self.root_seed, "streams": states}

    def restore(self, state):
        """Restore stream states captured by :meth:`state_dict`.

        Streams present in ``state`` are recreated with the recorded bit
        generator state; the hub's root seed is reset as well so streams
        first touched after the restore derive from the original seed.
        """
        self.root_seed = int(state["root_seed"])
        self._streams = {}
        for name, gen_state in state["streams"].items():
            gen = np.random.Generator(np.random.PCG64())
            gen.bit_generator.state = gen_state
            self._streams[name] = gen

    def to_json(self):
        """Serialize the full hub state to a JSON string."""
        return json.dumps(self.state_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        """Rebuild a hub from a string produced by :meth:`to_json`."""
        state = json.loads(text)
        hub = cls(int(state["root_seed"]))
        hub.restore(state)
        return hub
