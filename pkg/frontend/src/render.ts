import { agreementColor, labelColor } from "./colormap.js";
import type { OutlineRect } from "./state.js";

export interface LayerPixels {
  kind: "gray" | "labels" | "agreement";
  values: Float32Array; // row-major, height x width
  opacity: number; // 0..1
  range?: [number, number]; // gray windowing
  k?: number; // agreement colormap domain
}

/**
 * Pure alpha-over compositor; returns RGBA bytes for an ImageData buffer.
 * Label 0 and zero-opacity layers contribute nothing.
 */
export function compositeSlice(
  width: number,
  height: number,
  layers: LayerPixels[],
): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(width * height * 4);
  for (let i = 3; i < out.length; i += 4) out[i] = 255; // opaque black base

  for (const layer of layers) {
    if (layer.opacity <= 0) continue;
    if (layer.values.length !== width * height) {
      throw new Error(
        `layer size ${layer.values.length} != ${width}x${height}`);
    }
    const [lo, hi] = layer.range ?? [0, 1];
    const span = hi - lo || 1;
    for (let p = 0; p < width * height; p++) {
      const v = layer.values[p];
      let r: number;
      let g: number;
      let b: number;
      let a = layer.opacity;
      if (layer.kind === "gray") {
        const t = Math.min(Math.max((v - lo) / span, 0), 1);
        r = g = b = Math.round(t * 255);
      } else if (layer.kind === "labels") {
        if (v === 0) continue;
        [r, g, b] = labelColor(v);
      } else {
        [r, g, b] = agreementColor(v, layer.k ?? 10);
      }
      const o = p * 4;
      out[o] = Math.round(r * a + out[o] * (1 - a));
      out[o + 1] = Math.round(g * a + out[o + 1] * (1 - a));
      out[o + 2] = Math.round(b * a + out[o + 2] * (1 - a));
    }
  }
  return out;
}

/** Draw a 1px rectangle border (suggestion bbox) onto an RGBA buffer. */
export function drawOutline(
  buf: Uint8ClampedArray,
  width: number,
  height: number,
  rect: OutlineRect,
  color: [number, number, number] = [255, 0, 255],
): void {
  const put = (row: number, col: number) => {
    if (row < 0 || row >= height || col < 0 || col >= width) return;
    const o = (row * width + col) * 4;
    buf[o] = color[0];
    buf[o + 1] = color[1];
    buf[o + 2] = color[2];
    buf[o + 3] = 255;
  };
  for (let c = rect.col0; c <= rect.col1; c++) {
    put(rect.row0, c);
    put(rect.row1, c);
  }
  for (let r = rect.row0; r <= rect.row1; r++) {
    put(r, rect.col0);
    put(r, rect.col1);
  }
}
