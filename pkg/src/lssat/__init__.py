"""Joint classification + masked-reconstruction training over RGB and
local-texture streams, with a backbone/configuration benchmark harness."""

__version__ = "0.1.0"
