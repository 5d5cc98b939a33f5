"""Integer-quantized tiny-YOLO face detector.

Bit-exact quantized inference engine, YOLO decode / NMS / AP evaluation,
threaded streaming pipeline with a TCP framing protocol, and a PE/SIMD
folding latency estimator.
"""

__version__ = "0.1.0"
