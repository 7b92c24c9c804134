"""Reference trainer and prediction server for the evaluation harness.

The package trains a lightweight text classifier from an exported
``{prompt, image, target}`` corpus and serves predictions over a
newline-delimited JSON protocol on stdin/stdout, so the harness can bind
it as an external-command backend. A ``stub`` base model skips training
entirely and answers every request with ``FALSE``, which keeps protocol
and grid integration testable on any machine.
"""

__version__ = "0.1.0"
