export interface Pt {
  x: number;
  y: number;
}

/**
 * Even-odd point-in-polygon test (ray cast toward +x). Points exactly on an
 * edge land on whichever side the half-open rule picks; pixel centers at
 * .5 offsets never hit integer vertices, which is why the rasterizer samples
 * there.
 */
export function insideEvenOdd(x: number, y: number, poly: Pt[]): boolean {
  let inside = false;
  for (let i = 0, j = poly.length - 1; i < poly.length; j = i++) {
    const yi = poly[i].y;
    const yj = poly[j].y;
    if (yi > y !== yj > y) {
      const xCross =
        poly[i].x + ((y - yi) / (yj - yi)) * (poly[j].x - poly[i].x);
      if (x < xCross) inside = !inside;
    }
  }
  return inside;
}

export function boundsOf(poly: Pt[]) {
  let xMin = Infinity, yMin = Infinity, xMax = -Infinity, yMax = -Infinity;
  for (const p of poly) {
    if (p.x < xMin) xMin = p.x;
    if (p.x > xMax) xMax = p.x;
    if (p.y < yMin) yMin = p.y;
    if (p.y > yMax) yMax = p.y;
  }
  return { xMin, yMin, xMax, yMax };
}
