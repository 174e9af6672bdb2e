"""
SFEL Container Tests
====================

Test Coverage:
- Bit-exact round trip of tensors and metadata
- Network save/load with extra tensors
- Bad magic, unsupported version, truncated header and payload
"""

import struct
import tempfile
import unittest
import sys
from pathlib import Path

import numpy as np

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from checkpoint import FORMAT_VERSION, MAGIC, load_container, load_networks, save_container, save_network
from errors import FormatError
from layers import LayerSpec
from network import Network


class TestContainer(unittest.TestCase):
    """Raw container round trips and corruption."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'c.sfel'
        rng = np.random.default_rng(0)
        self.tensors = {'a': rng.normal(size=(3, 4)).astype(np.float32),
                        'b': np.arange(5, dtype=np.float32),
                        'empty': np.zeros((0, 2), dtype=np.float32)}

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_bit_exact(self):
        """Saved tensors come back bit-identical with their metadata."""
        save_container(self.path, self.tensors, {'kind': 'test', 'n': 3})
        tensors, meta = load_container(self.path)
        self.assertEqual(list(tensors), ['a', 'b', 'empty'])
        for name, arr in self.tensors.items():
            self.assertEqual(tensors[name].shape, arr.shape)
            self.assertEqual(tensors[name].tobytes(), arr.tobytes())
        self.assertEqual(meta, {'kind': 'test', 'n': 3})

    def test_preamble_layout(self):
        """The file starts with SFEL and the little-endian version."""
        save_container(self.path, self.tensors)
        magic, version, _ = struct.unpack_from('<4sII', self.path.read_bytes())
        self.assertEqual((magic, version), (MAGIC, FORMAT_VERSION))

    def test_bad_magic(self):
        """Wrong magic raises FormatError."""
        save_container(self.path, self.tensors)
        blob = bytearray(self.path.read_bytes())
        blob[:4] = b'NOPE'
        self.path.write_bytes(bytes(blob))
        with self.assertRaises(FormatError):
            load_container(self.path)

    def test_unsupported_version(self):
        """A future version number raises FormatError."""
        save_container(self.path, self.tensors)
        blob = bytearray(self.path.read_bytes())
        blob[4:8] = struct.pack('<I', FORMAT_VERSION + 1)
        self.path.write_bytes(bytes(blob))
        with self.assertRaises(FormatError):
            load_container(self.path)

    def test_truncated_payload(self):
        """Cutting bytes off the payload raises FormatError."""
        save_container(self.path, self.tensors)
        self.path.write_bytes(self.path.read_bytes()[:-4])
        with self.assertRaises(FormatError):
            load_container(self.path)

    def test_truncated_header(self):
        """A file shorter than its declared header raises FormatError."""
        save_container(self.path, self.tensors)
        self.path.write_bytes(self.path.read_bytes()[:20])
        with self.assertRaises(FormatError):
            load_container(self.path)

    def test_too_short(self):
        """A file shorter than the preamble raises FormatError."""
        self.path.write_bytes(b'SF')
        with self.assertRaises(FormatError):
            load_container(self.path)


class TestNetworkCheckpoint(unittest.TestCase):
    """save_network / load_networks."""

    def test_networks_and_extra(self):
        """Networks reload with identical outputs; extras come back separately."""
        specs = [LayerSpec.dense(4), LayerSpec.batchnorm(), LayerSpec.act('tanh'), LayerSpec.dense(2)]
        a = Network(specs, (3,), seed=1, name='a')
        a.train().forward(np.random.default_rng(0).normal(size=(8, 3)))
        a.eval()
        b = Network([LayerSpec.dense(1)], (2,), seed=2, name='b')
        extra = {'norm/min': np.array([-1.0, 0.0], dtype=np.float32)}

        with tempfile.TemporaryDirectory() as tmp:
            path = save_network(Path(tmp) / 'n.sfel', {'a': a, 'b': b}, {'kind': 'pair'}, extra)
            networks, leftovers, meta = load_networks(path)

        x = np.random.default_rng(1).normal(size=(5, 3)).astype(np.float32)
        np.testing.assert_array_equal(networks['a'].infer(x), a.infer(x))
        self.assertEqual(networks['b'].layer_shapes(), b.layer_shapes())
        np.testing.assert_array_equal(leftovers['norm/min'], extra['norm/min'])
        self.assertEqual(meta['kind'], 'pair')
        self.assertEqual(set(meta['networks']), {'a', 'b'})


if __name__ == '__main__':
    unittest.main(verbosity=2)
