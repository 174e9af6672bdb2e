"""
Command Line Tests
==================

Test Coverage:
- Subcommand parsing and flag-to-config mapping
- Exit codes: 0 success, 1 experiment error, 2 unexpected error
- train-target on a tiny MNIST fixture
"""

import struct
import tempfile
import unittest
import sys
from pathlib import Path
from unittest import mock

import numpy as np

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

import main
from classifier import load_classifier
from mnist_loader import TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS, ImageSet
from pairs import PairDataset


def write_mnist(directory: Path, n: int = 6):
    rng = np.random.default_rng(1)
    for images, labels in ((TRAIN_IMAGES, TRAIN_LABELS), (TEST_IMAGES, TEST_LABELS)):
        pixels = rng.integers(0, 256, size=(n, 28, 28)).astype(np.uint8)
        (directory / images).write_bytes(struct.pack('>IIII', 2051, n, 28, 28) + pixels.tobytes())
        (directory / labels).write_bytes(struct.pack('>II', 2049, n) + (np.arange(n) % 10).astype(np.uint8).tobytes())


class TestParser(unittest.TestCase):
    """Argument parsing."""

    def setUp(self):
        self.parser = main.build_parser()

    def test_command_required(self):
        """Running without a subcommand is a usage error."""
        with self.assertRaises(SystemExit):
            self.parser.parse_args([])

    def test_required_inputs(self):
        """attack needs a classifier checkpoint."""
        with self.assertRaises(SystemExit):
            self.parser.parse_args(['attack', '--out', 'x.sfel'])

    def test_unknown_method(self):
        """Attack names are checked by the parser."""
        with self.assertRaises(SystemExit):
            self.parser.parse_args(['attack', '--model', 'm', '--method', 'cw', '--out', 'x'])

    def test_iters_maps_by_command(self):
        """--iters sets the SFE iterations for train-sfe and the attack iterations for attack."""
        args = self.parser.parse_args(['train-sfe', '--pairs', 'p', '--model', 'm', '--iters', '50', '--out', 'o'])
        overrides = main.overrides_from_args(args)
        self.assertEqual((overrides['sfe.iterations'], overrides['attack.iters']), (50, None))

        args = self.parser.parse_args(['attack', '--model', 'm', '--iters', '7', '--out', 'o'])
        overrides = main.overrides_from_args(args)
        self.assertEqual((overrides['sfe.iterations'], overrides['attack.iters']), (None, 7))

    def test_global_flags(self):
        """Global flags map onto [run] and [data]."""
        args = self.parser.parse_args(['--seed', '4', '--threads', '2', '--data-dir', '/d', 'run'])
        overrides = main.overrides_from_args(args)
        self.assertEqual((overrides['run.seed'], overrides['run.threads'], overrides['data.dir']), (4, 2, '/d'))

    def test_transfer_defences(self):
        """transfer takes several ATTACK=SFE,ADVD specifications."""
        args = self.parser.parse_args(['transfer', '--model', 'm', '--defence', 'bim=s.sfel,a.sfel',
                                       'pgd=s2.sfel,a2.sfel', '--pairs', 'p1', 'p2', '--out', 'o.json'])
        self.assertEqual(len(args.defence), 2)
        self.assertEqual(args.pairs, ['p1', 'p2'])


class TestExitCodes(unittest.TestCase):
    """main() return values."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.out = str(self.root / 'runs')

    def tearDown(self):
        self.tmp.cleanup()

    def test_missing_config_file(self):
        """A missing --config file exits with 1."""
        self.assertEqual(main.main(['--config', str(self.root / 'absent.ini'), 'run']), 1)

    def test_missing_dataset(self):
        """train-target without a dataset directory exits with 1."""
        code = main.main(['--out-dir', self.out, '--data-dir', str(self.root / 'absent'), '--no-progress',
                          'train-target', '--out', str(self.root / 'm.sfel')])
        self.assertEqual(code, 1)

    def test_unexpected_error(self):
        """Anything that is not an experiment error exits with 2."""
        failing = mock.Mock(side_effect=RuntimeError('boom'))
        with mock.patch.dict(main.COMMANDS, {'run': failing}):
            self.assertEqual(main.main(['--out-dir', self.out, 'run']), 2)
        failing.assert_called_once()

    def test_no_successful_pairs(self):
        """train-sfe on pairs the attack never flipped is an experiment error: exit 1."""
        benign = ImageSet(np.zeros((10, 2, 2, 1)), np.arange(10) % 3)
        failed = PairDataset(benign, benign.images, 'cra')
        with mock.patch.object(main, 'load_classifier'), mock.patch.object(main, 'load_pairs', return_value=failed):
            code = main.main(['--out-dir', self.out, '--no-progress', 'train-sfe', '--pairs', 'p.sfel',
                              '--model', 'm.sfel', '--out', str(self.root / 'sfe.sfel')])
        self.assertEqual(code, 1)

    def test_train_target(self):
        """train-target writes a loadable classifier and exits with 0."""
        data = self.root / 'mnist'
        data.mkdir()
        write_mnist(data)
        target = self.root / 'cnn2.sfel'
        code = main.main(['--out-dir', self.out, '--data-dir', str(data), '--no-progress',
                          'train-target', '--model', 'cnn2', '--epochs', '0', '--out', str(target)])
        self.assertEqual(code, 0)
        self.assertEqual(load_classifier(target).arch, 'cnn2')


if __name__ == '__main__':
    unittest.main(verbosity=2)
