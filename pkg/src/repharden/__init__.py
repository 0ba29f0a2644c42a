"""Adversarial hardening workbench for behavior-report malware classifiers."""

__version__ = "0.1.0"
