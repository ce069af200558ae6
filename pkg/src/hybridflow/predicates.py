"""Orientation and in-circle tests with a floating-point filter.

The fast path evaluates the determinant in doubles and accepts its sign when
the magnitude clears a forward error bound; otherwise the determinant is
recomputed exactly with rationals. Inputs are finite doubles, which
``Fraction`` represents exactly.
"""

from fractions import Fraction
import sys

_EPS = sys.float_info.epsilon / 2
_CCW_BOUND = (3.0 + 16.0 * _EPS) * _EPS
_ICC_BOUND = (10.0 + 96.0 * _EPS) * _EPS


def _sign(x) -> int:
    return int(x > 0) - int(x < 0)


def orient2d(a, b, c) -> int:
    """+1 if ``a, b, c`` turn counter-clockwise, -1 if clockwise, 0 if collinear."""
    acx = a[0] - c[0]
    bcx = b[0] - c[0]
    acy = a[1] - c[1]
    bcy = b[1] - c[1]
    left = acx * bcy
    right = acy * bcx
    det = left - right
    if abs(det) > _CCW_BOUND * (abs(left) + abs(right)):
        return _sign(det)
    ax, ay, bx, by, cx, cy = (Fraction(v) for v in (a[0], a[1], b[0], b[1], c[0], c[1]))
    return _sign((ax - cx) * (by - cy) - (ay - cy) * (bx - cx))


def incircle(a, b, c, d) -> int:
    """+1 if ``d`` lies strictly inside the circle through counter-clockwise ``a, b, c``."""
    adx = a[0] - d[0]
    bdx = b[0] - d[0]
    cdx = c[0] - d[0]
    ady = a[1] - d[1]
    bdy = b[1] - d[1]
    cdy = c[1] - d[1]
    bdxcdy = bdx * cdy
    cdxbdy = cdx * bdy
    alift = adx * adx + ady * ady
    cdxady = cdx * ady
    adxcdy = adx * cdy
    blift = bdx * bdx + bdy * bdy
    adxbdy = adx * bdy
    bdxady = bdx * ady
    clift = cdx * cdx + cdy * cdy
    det = alift * (bdxcdy - cdxbdy) + blift * (cdxady - adxcdy) + clift * (adxbdy - bdxady)
    permanent = (
        (abs(bdxcdy) + abs(cdxbdy)) * alift
        + (abs(cdxady) + abs(adxcdy)) * blift
        + (abs(adxbdy) + abs(bdxady)) * clift
    )
    if abs(det) > _ICC_BOUND * permanent:
        return _sign(det)
    ax, ay, bx, by, cx, cy, dx, dy = (
        Fraction(v) for v in (a[0], a[1], b[0], b[1], c[0], c[1], d[0], d[1])
    )
    adx, ady = ax - dx, ay - dy
    bdx, bdy = bx - dx, by - dy
    cdx, cdy = cx - dx, cy - dy
    det = (
        (adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
        + (bdx * bdx + bdy * bdy) * (cdx * ady - adx * cdy)
        + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady)
    )
    return _sign(det)
