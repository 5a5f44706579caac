#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#
__version__ = '0.4.0'
