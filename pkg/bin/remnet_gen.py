#!/usr/bin/env python
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
Generate a synthetic camera-signature dataset with device and scene exclusive train/val/test splits.

@author: Andy Georges (Ghent University)
"""
import sys

from vsc.forensics.cli import run_command


def main():
    sys.exit(run_command('gen'))


if __name__ == '__main__':
    main()
