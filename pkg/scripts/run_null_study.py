"""Null-effect study: e^b0 = e^b1 = 1 on the synthetic base panel."""

from _study import main

if __name__ == "__main__":
    main("reference-null", __doc__)
