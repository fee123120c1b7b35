export type Rgb = [number, number, number];

// agreement 1.0 renders dark blue, agreement 1/K dark red, warm-to-cool in
// between; endpoints are exact by contract
export const DARK_BLUE: Rgb = [0, 0, 128];
export const DARK_RED: Rgb = [128, 0, 0];

const STOPS: Array<[number, Rgb]> = [
  [0.0, DARK_RED],
  [0.25, [255, 60, 0]],
  [0.5, [255, 255, 0]],
  [0.75, [120, 200, 255]],
  [1.0, DARK_BLUE],
];

function lerp(a: number, b: number, t: number): number {
  return a + (b - a) * t;
}

export function agreementColor(agreement: number, k: number): Rgb {
  const lo = 1 / k;
  if (agreement <= lo) return [...DARK_RED];
  if (agreement >= 1) return [...DARK_BLUE];
  const t = (agreement - lo) / (1 - lo);
  for (let i = 1; i < STOPS.length; i++) {
    const [t1, c1] = STOPS[i];
    const [t0, c0] = STOPS[i - 1];
    if (t <= t1) {
      const f = (t - t0) / (t1 - t0);
      return [
        Math.round(lerp(c0[0], c1[0], f)),
        Math.round(lerp(c0[1], c1[1], f)),
        Math.round(lerp(c0[2], c1[2], f)),
      ];
    }
  }
  return [...DARK_BLUE];
}

// background stays transparent in overlays; tissues get categorical colors
export const LABEL_COLORS: Rgb[] = [
  [0, 0, 0],
  [70, 130, 180],
  [60, 179, 113],
  [255, 165, 0],
];

export function labelColor(label: number): Rgb {
  const c = LABEL_COLORS[label];
  if (!c) throw new Error(`no color for label ${label}`);
  return [...c];
}
