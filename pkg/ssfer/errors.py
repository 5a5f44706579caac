#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

""" Defines custom exceptions and error handling functions """

import functools
import json
import logging
import sys

import click


logger = logging.getLogger(__name__)


class SSFERError(Exception):
    """Base SSFERError"""
    code = 1

    def to_dict(self):
        """Turn the exception into a dict for use as an error report"""
        return {
            'status': self.code,
            'error': self.__class__.__name__,
            'message': str(self)
        }


class ConfigError(SSFERError, ValueError):
    """Configuration document or runtime setting is invalid"""
    code = 2

    def __init__(self, msg, key=None):
        """
        :param msg: the message this exception should have
        :param key: dotted path of the offending configuration key, if known
        """
        super().__init__(msg)
        self.key = key

    def to_dict(self):
        data = super().to_dict()
        data['key'] = self.key
        return data


class DatasetError(SSFERError, ValueError):
    """Samples or splits don't meet expectations"""
    code = 3


class InsufficientSamplesError(DatasetError):
    """A class has fewer samples than the requested label budget"""

    def __init__(self, msg, class_index):
        """
        :param msg: the message this exception should have
        :param class_index: the class which ran short of samples
        """
        super().__init__(msg)
        self.class_index = class_index

    def to_dict(self):
        data = super().to_dict()
        data['class_index'] = self.class_index
        return data


class ShapeMismatchError(SSFERError, ValueError):
    """Two arrays which must agree in shape don't"""
    code = 3


class CheckpointError(SSFERError):
    """Checkpoint can't be read or written"""
    code = 4


class CheckpointMismatchError(CheckpointError):
    """Checkpoint was produced for another model configuration"""

    def __init__(self, msg, expected_hash, found_hash):
        """
        :param msg: the message this exception should have
        :param expected_hash: model config hash of the consumer
        :param found_hash: model config hash stored in the checkpoint
        """
        super().__init__(msg)
        self.expected_hash = expected_hash
        self.found_hash = found_hash

    def to_dict(self):
        data = super().to_dict()
        data['expected_hash'] = self.expected_hash
        data['found_hash'] = self.found_hash
        return data


class TrainingDivergedError(SSFERError):
    """Loss became NaN or infinite"""
    code = 5

    def __init__(self, msg, stage, epoch):
        """
        :param msg: the message this exception should have
        :param stage: training stage which diverged
        :param epoch: epoch in which the divergence was detected
        """
        super().__init__(msg)
        self.stage = stage
        self.epoch = epoch

    def to_dict(self):
        data = super().to_dict()
        data['stage'] = self.stage
        data['epoch'] = self.epoch
        return data


class UnknownExperimentError(SSFERError, KeyError):
    """Requested experiment doesn't exist"""
    code = 2

    def __init__(self, msg, available):
        """
        :param msg: the message this exception should have
        :param available: names of the registered experiments
        """
        super().__init__(msg)
        self.available = sorted(available)

    def __str__(self):
        # KeyError quotes its message otherwise
        return self.args[0]

    def to_dict(self):
        data = super().to_dict()
        data['available'] = self.available
        return data


class OutputDirExistsError(SSFERError):
    """Output directory already holds a run and overwrite wasn't requested"""
    code = 6


def init_errors_handling(command):
    """Wrap a click command so that errors end the process with a diagnostic

    SSFER errors are reported as JSON on stderr and the process exits with
    the error's code. Anything else is logged with a traceback and exits 1.
    """
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except SSFERError as e:
            err_dict = e.to_dict()
            logger.error('SSFER error: %s: %r', err_dict['error'], err_dict)
            click.echo(json.dumps(err_dict, sort_keys=True), err=True)
            sys.exit(e.code)
        except (click.ClickException, click.exceptions.Exit,
                click.exceptions.Abort):
            raise
        except Exception as e:
            logger.exception('Internal error: %s', e)
            click.echo(json.dumps({
                'status': 1,
                'error': 'InternalError',
                'message': str(e),
            }, sort_keys=True), err=True)
            sys.exit(1)

    return wrapper
