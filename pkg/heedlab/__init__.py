# coding: utf-8
"""
Density-weighted residual alignment laboratory.

Distil a small all-attention teacher into a 3:1 mixer/attention hybrid
student with residual-stream alignment, weighted per position by a
training-free patch density signal, and run the diagnostic protocol that
motivates it (residual drift, masking importance, semi-partial R², Fisher
sensitivity checks).

This module is maintained by the heedlab developers.

Versionning
-----------
We use semantic versioning (https://semver.org) compliant with the PEP-440.
To declare a beta, use this schema:
    - X.Y.ZbN i.e. "2.4.5b1"
"""

__version__ = "0.1.0"
__author__ = "heedlab developers"
__copyright__ = """
Copyright (c) 2026, heedlab developers

Permission to use, copy, modify, and distribute this software and its
documentation for any purpose and without fee or royalty is hereby
granted, provided that the above copyright notice appear in all copies
and that both that copyright notice and this permission notice appear
in supporting documentation or portions thereof, including
modifications, that you make.
"""
