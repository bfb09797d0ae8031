"""Grid attack-synthesis workbench.

Models multi-generator AGC closed loops with Kalman-residue anomaly
detection, and searches for combined breaker-toggling / sensor-falsification
attack vectors that push generator frequency out of its safe band without
tripping the detector.
"""

__version__ = "0.1.0"
