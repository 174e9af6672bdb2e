"""
Configuration Tests
===================

Test Coverage:
- Defaults, file values and command-line overrides in resolution order
- Type coercion including empty optional values and lists
- Unknown sections / keys and malformed values
- SFE_LAB_DATA environment variable
- Configuration hash stability
"""

import os
import tempfile
import unittest
import sys
from pathlib import Path
from unittest import mock

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from config import DATA_ENV, ExperimentConfig, config_hash, parse_config, require_data_dir
from errors import ConfigError


class ConfigFileTest(unittest.TestCase):
    """Writes config.ini fixtures into a temporary directory."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        patcher = mock.patch.dict(os.environ, {}, clear=False)
        patcher.start()
        os.environ.pop(DATA_ENV, None)
        self.addCleanup(patcher.stop)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text: str) -> Path:
        path = self.dir / 'config.ini'
        path.write_text(text)
        return path


class TestParseConfig(ConfigFileTest):
    """Resolution order and coercion."""

    def test_empty_file_gives_defaults(self):
        """An empty file resolves to the dataclass defaults."""
        config = parse_config(self.write(''))
        self.assertEqual(config.to_dict(), ExperimentConfig().to_dict())

    def test_defaults_without_file(self):
        """No path at all also gives the defaults."""
        config = parse_config()
        self.assertEqual((config.model.name, config.sfe.k_d, config.detector.split_ratio), ('cnn1', 5, 0.7))

    def test_timings_off_by_default(self):
        """Reports carry no wall-clock columns unless asked for."""
        self.assertFalse(parse_config().evaluation.record_timings)
        self.assertTrue(parse_config(overrides={'evaluation.record_timings': 'true'}).evaluation.record_timings)

    def test_file_values(self):
        """File values are coerced to the declared types."""
        config = parse_config(self.write(
            "[model]\nname = cnn2\nepochs = 3\n"
            "[attack]\neps = 0.1\neval_methods = fgsm, cra\n"
            "[evaluation]\nadaptive = no\n"))
        self.assertEqual((config.model.name, config.model.epochs), ('cnn2', 3))
        self.assertEqual(config.attack.eps, 0.1)
        self.assertEqual(config.attack.eval_methods, ('fgsm', 'cra'))
        self.assertFalse(config.evaluation.adaptive)

    def test_empty_optional_is_none(self):
        """An empty value for an optional key means None."""
        config = parse_config(self.write("[data]\ntrain_limit =\n[attack]\niters = none\n"))
        self.assertIsNone(config.data.train_limit)
        self.assertIsNone(config.attack.iters)

    def test_override_wins(self):
        """Command-line overrides beat the file; None overrides are skipped."""
        path = self.write("[run]\nseed = 3\n[model]\nepochs = 2\n")
        config = parse_config(path, {'run.seed': 11, 'model.epochs': None})
        self.assertEqual((config.run.seed, config.model.epochs), (11, 2))

    def test_environment_data_dir(self):
        """SFE_LAB_DATA replaces data.dir but a --data-dir override still wins."""
        os.environ[DATA_ENV] = '/env/mnist'
        self.assertEqual(parse_config().data.dir, '/env/mnist')
        self.assertEqual(parse_config(overrides={'data.dir': '/cli/mnist'}).data.dir, '/cli/mnist')

    def test_missing_file(self):
        """A named but missing file raises FileNotFoundError."""
        with self.assertRaises(FileNotFoundError):
            parse_config(self.dir / 'absent.ini')


class TestConfigErrors(ConfigFileTest):
    """Rejections name the section and key."""

    def test_unknown_key(self):
        """An unknown key raises ConfigError naming it."""
        with self.assertRaises(ConfigError) as ctx:
            parse_config(self.write("[sfe]\nlearning_rate = 0.1\n"))
        self.assertIn('learning_rate', str(ctx.exception))
        self.assertIn('[sfe]', str(ctx.exception))

    def test_unknown_section(self):
        """An unknown section raises ConfigError."""
        with self.assertRaises(ConfigError):
            parse_config(self.write("[network]\nhost = x\n"))

    def test_malformed_value(self):
        """A non-integer where an integer is expected raises ConfigError."""
        with self.assertRaises(ConfigError) as ctx:
            parse_config(self.write("[sfe]\nm_b = many\n"))
        self.assertIn('m_b', str(ctx.exception))

    def test_out_of_range(self):
        """Values outside their allowed set fail validation."""
        for overrides in ({'detector.split_ratio': 1.0}, {'model.name': 'lenet'}, {'attack.method': 'cw'},
                          {'sfe.generator_depth': 'wide'}, {'run.threads': 0}):
            with self.assertRaises(ConfigError):
                parse_config(overrides=overrides)

    def test_override_without_section(self):
        """Overrides must be section.key."""
        with self.assertRaises(ConfigError):
            parse_config(overrides={'seed': 1})

    def test_missing_data_dir(self):
        """require_data_dir reports a missing dataset directory."""
        config = parse_config(overrides={'data.dir': str(self.dir / 'nowhere')})
        with self.assertRaises(ConfigError):
            require_data_dir(config)


class TestConfigHash(unittest.TestCase):
    """config_hash."""

    def test_stable(self):
        """The same configuration hashes identically; the hash is 12 hex digits."""
        a, b = config_hash(ExperimentConfig()), config_hash(ExperimentConfig())
        self.assertEqual(a, b)
        self.assertEqual(len(a), 12)
        int(a, 16)

    def test_ignores_output_location_and_threads(self):
        """out_dir, threads and log level never change the hash."""
        other = ExperimentConfig()
        other.run.out_dir = '/elsewhere'
        other.run.threads = 8
        other.logging.level = 'DEBUG'
        self.assertEqual(config_hash(other), config_hash(ExperimentConfig()))

    def test_result_settings_change_hash(self):
        """Seed changes the hash."""
        other = ExperimentConfig()
        other.run.seed = 1
        self.assertNotEqual(config_hash(other), config_hash(ExperimentConfig()))

    def test_section_subset(self):
        """Hashing selected sections ignores the others."""
        other = ExperimentConfig()
        other.sfe.iterations = 10
        self.assertEqual(config_hash(other, ['data', 'model']), config_hash(ExperimentConfig(), ['data', 'model']))
        self.assertNotEqual(config_hash(other, ['sfe']), config_hash(ExperimentConfig(), ['sfe']))


if __name__ == '__main__':
    unittest.main(verbosity=2)
