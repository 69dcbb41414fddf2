import os
import tempfile
import unittest

import numpy as np

from lib.checkpoint import checkpoint_digest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from lib.errors import CheckpointError
from lib.network import build_model
from lib.tensor import AdamState, adam_step


class TestCheckpoint(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.params = build_model(3, seed=4)
        cls.params.bn_stats["a1.bn"].mean[...] = 0.25
        grads = {name: np.full(t.shape, 0.01, dtype=t.data.dtype) for name, t in cls.params.weights.items()}
        cls.adam = adam_step(cls.params.weights, grads, AdamState(lr=1e-3))
        cls.blob = encode_checkpoint(cls.params, cls.adam, {"step": 1, "seed": 4})

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_load_save_is_byte_identical(self):
        first = os.path.join(self.tmp.name, "a.ckpt")
        second = os.path.join(self.tmp.name, "b.ckpt")
        save_checkpoint(self.params, self.adam, first, {"step": 1, "seed": 4})
        loaded = load_checkpoint(first)
        save_checkpoint(loaded.params, loaded.adam, second, loaded.meta)
        with open(first, "rb") as a, open(second, "rb") as b:
            self.assertEqual(a.read(), b.read())
        self.assertEqual(checkpoint_digest(first), checkpoint_digest(second))

    def test_state_round_trips(self):
        restored = decode_checkpoint(self.blob)
        self.assertEqual(restored.params.num_classes, 3)
        self.assertEqual(restored.meta, {"seed": 4, "step": 1})
        for name, tensor in self.params.weights.items():
            np.testing.assert_array_equal(restored.params[name].data, tensor.data)
        np.testing.assert_array_equal(restored.params.bn_stats["a1.bn"].mean, np.full(19, 0.25))
        self.assertEqual(restored.adam.t, 1)
        self.assertEqual(restored.adam.lr, 1e-3)
        np.testing.assert_array_equal(restored.adam.m["fc3.w"], self.adam.m["fc3.w"])

    def test_without_optimizer_state(self):
        restored = decode_checkpoint(encode_checkpoint(self.params))
        self.assertIsNone(restored.adam)

    def test_class_count_mismatch(self):
        blob = self.blob.replace(b"num_classes 3\n", b"num_classes 4\n", 1)
        with self.assertRaises(CheckpointError):
            decode_checkpoint(blob)

    def test_version_mismatch(self):
        blob = self.blob.replace(b"format_version 1\n", b"format_version 2\n", 1)
        with self.assertRaises(CheckpointError) as ctx:
            decode_checkpoint(blob)
        self.assertIn("version", str(ctx.exception))

    def test_truncated_and_trailing(self):
        with self.assertRaises(CheckpointError):
            decode_checkpoint(self.blob[:-8])
        with self.assertRaises(CheckpointError):
            decode_checkpoint(self.blob + b"\x00" * 4)
        with self.assertRaises(CheckpointError):
            decode_checkpoint(self.blob[:40])

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.tmp.name, "absent.ckpt"))


if __name__ == '__main__':
    unittest.main()
