#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Tests for ssfer.settings module"""

import pytest

from ssfer import constants, settings
from ssfer.settings import Config, DefaultConfig, DevConfig, init_config


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in (constants.ENV_CONF_FILE, constants.ENV_CONF_SECTION,
                 constants.ENV_DEVELOPER_ENV, constants.ENV_THREADS):
        monkeypatch.delenv(name, raising=False)


@pytest.mark.parametrize('key,expected', (
    ('debug', False),
    ('log_level', 'INFO'),
    (
        'log_format',
        '%(asctime)s - [%(process)d] %(name)s - %(levelname)s - %(message)s'
    ),
    ('threads', None),
    ('emit_plots', True),
))
def test_defaults(key, expected):
    """Test if defaults are properly propagated"""

    class ConfClass:
        pass

    conf = Config(ConfClass)
    assert getattr(conf, key) == expected, f"failed for key '{key}'"


def test_log_level_debug():
    """Test of setting DEBUG log level"""

    class ConfClass(DefaultConfig):
        LOG_LEVEL = 'debug'

    conf = Config(ConfClass)
    assert conf.log_level == 'DEBUG'


@pytest.mark.parametrize('value', (
    'INVALID',
    10,
    True,
))
def test_log_level_invalid(value):
    """Test of setting invalid log level"""

    class ConfClass(DefaultConfig):
        LOG_LEVEL = value

    with pytest.raises(ValueError):
        Config(ConfClass)


def test_log_format():
    """Test of setting log format"""
    expected = 'Test'

    class ConfClass(DefaultConfig):
        LOG_FORMAT = expected

    conf = Config(ConfClass)
    assert conf.log_format == expected


def test_threads_from_env(monkeypatch):
    """Thread cap defaults to the environment"""
    monkeypatch.setenv(constants.ENV_THREADS, '3')
    assert Config(DefaultConfig).threads == 3


def test_threads_section_wins(monkeypatch):
    monkeypatch.setenv(constants.ENV_THREADS, '3')
    assert Config(settings.TestConfig).threads == 1


@pytest.mark.parametrize('value', (0, -2))
def test_threads_invalid(value):
    """Test of setting invalid thread cap"""

    class ConfClass(DefaultConfig):
        THREADS = value

    with pytest.raises(ValueError):
        Config(ConfClass)


def test_threads_not_a_number():

    class ConfClass(DefaultConfig):
        THREADS = 'many'

    with pytest.raises(TypeError):
        Config(ConfClass)


def test_test_config():
    conf = Config(settings.TestConfig)
    assert conf.emit_plots is False
    assert conf.threads == 1
    assert conf.log_level == 'DEBUG'


def test_dev_config():
    conf = Config(DevConfig)
    assert conf.debug is True
    assert conf.log_level == 'DEBUG'


def test_init_config_under_pytest():
    """Test runs pick the test section"""
    assert init_config().emit_plots is False


def test_init_config_from_file(monkeypatch, tmpdir):
    """Sections can be loaded from a python file"""
    path = tmpdir.join('runtime.py')
    path.write('class Lab:\n    LOG_LEVEL = "WARNING"\n    THREADS = 2\n')
    monkeypatch.setenv(constants.ENV_CONF_FILE, str(path))
    monkeypatch.setenv(constants.ENV_CONF_SECTION, 'Lab')
    conf = init_config()
    assert conf.log_level == 'WARNING'
    assert conf.threads == 2


def test_init_config_missing_section(monkeypatch, tmpdir):
    path = tmpdir.join('runtime.py')
    path.write('class Lab:\n    pass\n')
    monkeypatch.setenv(constants.ENV_CONF_FILE, str(path))
    monkeypatch.setenv(constants.ENV_CONF_SECTION, 'Nope')
    with pytest.raises(RuntimeError):
        init_config()
