# -*- coding: latin-1 -*-
#
# Copyright 2020-2023 Ghent University
#
# This file is part of vsc-forensics,
# originally created by the HPC team of Ghent University (http://ugent.be/hpc/en),
# with support of Ghent University (http://ugent.be/hpc),
# the Flemish Supercomputer Centre (VSC) (https://www.vscentrum.be),
# the Flemish Research Foundation (FWO) (http://www.fwo.be/en)
# and the Department of Economy, Science and Innovation (EWI) (http://www.ewi-vlaanderen.be/en).
#
# https://github.com/hpcugent/vsc-forensics
#
# All rights reserved.
#
"""
Image forensics with an L2-constrained remnant network: camera model identification and
image manipulation detection.

@author Andy Georges
"""
#the vsc namespace is used in different folders allong the system
#so explicitly declare this is also the vsc namespace
import sys

import pkg_resources
pkg_resources.declare_namespace(__name__)

from vsc.utils.missing import namedtuple_with_defaults


class ForensicsError(Exception):
    pass


class ConfigurationError(ForensicsError):
    """Bad shapes, hyper-parameters or option combinations."""
    pass


def namedrecord(typename, field_names, default_values=None):
    """
    namedtuple_with_defaults, with the class registered in the calling module.

    Records cross process boundaries in worker pools and must pickle by reference.
    """
    record = namedtuple_with_defaults(typename, field_names, default_values or {})
    record.__module__ = sys._getframe(1).f_globals.get('__name__', __name__)
    return record
