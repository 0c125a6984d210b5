#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""Indicates the version of diffcomp."""

__version__ = "0.1.0"
