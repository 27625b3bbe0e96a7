"""Effect study: e^b0 = e^b1 = 0.95 on the synthetic base panel."""

from _study import main

if __name__ == "__main__":
    main("reference-effect", __doc__)
