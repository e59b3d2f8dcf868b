"""Embedding extraction adapter.

Encodes real images or texts with a pretrained contrastive encoder and
writes EMB1 stores plus metadata sidecars. The EMB1 file format is the
sole contract with the diagnosis toolkit: this package never imports it.
"""

__version__ = "0.1.0"
