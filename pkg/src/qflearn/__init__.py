"""Data-driven learning of physical-layer transceivers over unknown channels,
with receiver-to-transmitter feedback restricted to quantized (and possibly
bit-flipped) per-sample losses.

Modules:
  neuralnet    dense networks, backprop, Adam, JSON checkpoints
  channels     AWGN and nonlinear phase-noise models, binary symmetric channel
  transceiver  message encoding, power-normalized transmit, exploration policy
  feedback     loss pre-processing, fixed quantization, Bussgang analysis
  training     alternating receiver/transmitter optimization
  evaluation   SER, ML baselines, decision regions, gradient-scaling checks
  cli          experiment runner (JSON configs in, CSV/JSON artifacts out)
"""

__version__ = "0.1.0"
