import pytest

from xyz_scgan.config import (ConfigError, build_options, dump_config, parse_config_text, to_bool,
                              to_int_tuple)


class TestParse:

    def test_comments_and_blank_lines(self):
        text = '# run\n\nscale = 2  # inline\n   # indented comment\nbatch_size=4\n'
        assert parse_config_text(text) == {'scale': '2', 'batch_size': '4'}

    def test_hash_inside_a_value_is_kept(self):
        data = parse_config_text('feature_weights = runs/a#1/fe.npz\ntag = x#y # trailing\n')
        assert data == {'feature_weights': 'runs/a#1/fe.npz', 'tag': 'x#y'}

    def test_value_may_contain_equals(self):
        assert parse_config_text('note = a=b')['note'] == 'a=b'

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match='cfg:2'):
            parse_config_text('scale = 2\nbatch_size 4\n', source='cfg')

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate key 'scale'"):
            parse_config_text('scale = 2\nscale = 4\n')

    def test_empty_key(self):
        with pytest.raises(ConfigError, match='empty key'):
            parse_config_text(' = 4\n')


class TestOptions:

    def test_converts_by_type_map(self):
        types = {'batch_size': int, 'lr': float, 'log': to_bool, 'channels': to_int_tuple}
        rs = build_options({'batch_size': '8', 'lr': '5e-4', 'log': 'off', 'channels': '64, 128'}, types)
        assert rs == {'batch_size': 8, 'lr': 5e-4, 'log': False, 'channels': (64, 128)}

    def test_unknown_keys_are_named(self):
        with pytest.raises(ConfigError, match='bogus, nope'):
            build_options({'nope': '1', 'bogus': '2'}, {'batch_size': int})

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="'batch_size'"):
            build_options({'batch_size': 'eight'}, {'batch_size': int})

    def test_to_bool(self):
        assert to_bool('Yes') is True and to_bool('0') is False
        with pytest.raises(ConfigError):
            to_bool('maybe')

    def test_dump_parses_back(self):
        options = {'scale': 2, 'd_channels': (8, 16), 'content_loss': 'mse'}
        data = parse_config_text(dump_config(options))
        assert data == {'content_loss': 'mse', 'd_channels': '8,16', 'scale': '2'}
