import { planeAxes, voxelAt, type Axis } from "./state.js";
import type { Voxel } from "./types.js";

/**
 * Voxels under a circular brush in the slice plane. Radius 0 paints exactly
 * the clicked voxel; larger radii fill the in-plane disc, clipped to bounds.
 */
export function brushVoxels(
  axis: Axis,
  sliceIndex: number,
  row: number,
  col: number,
  radius: number,
  dims: [number, number, number],
): Voxel[] {
  const [rowAxis, colAxis] = planeAxes(axis);
  const rowMax = dims[rowAxis];
  const colMax = dims[colAxis];
  const r = Math.max(0, Math.floor(radius));
  const out: Voxel[] = [];
  for (let dr = -r; dr <= r; dr++) {
    for (let dc = -r; dc <= r; dc++) {
      if (dr * dr + dc * dc > r * r) continue;
      const rr = row + dr;
      const cc = col + dc;
      if (rr < 0 || rr >= rowMax || cc < 0 || cc >= colMax) continue;
      out.push(voxelAt(axis, sliceIndex, rr, cc));
    }
  }
  return out;
}

export function voxelKey(v: Voxel): string {
  return `${v[0]},${v[1]},${v[2]}`;
}

/** Pending local paint, keyed by voxel, replayed last-writer-wins. */
export class CorrectionOverlay {
  private map = new Map<string, { voxel: Voxel; label: number }>();

  paint(voxels: Voxel[], label: number): void {
    for (const v of voxels) this.map.set(voxelKey(v), { voxel: v, label });
  }

  erase(voxels: Voxel[]): void {
    for (const v of voxels) this.map.delete(voxelKey(v));
  }

  labelAt(v: Voxel): number | undefined {
    return this.map.get(voxelKey(v))?.label;
  }

  get size(): number {
    return this.map.size;
  }

  entries(): Array<{ voxel: Voxel; label: number }> {
    return [...this.map.values()];
  }

  clear(): void {
    this.map.clear();
  }

  /** Merge pending paint into a fused-label slice buffer (in place). */
  applyToSlice(
    values: Float32Array,
    axis: Axis,
    sliceIndex: number,
    width: number,
  ): void {
    for (const { voxel, label } of this.map.values()) {
      let row: number;
      let col: number;
      if (axis === 0) {
        if (voxel[0] !== sliceIndex) continue;
        [row, col] = [voxel[1], voxel[2]];
      } else if (axis === 1) {
        if (voxel[1] !== sliceIndex) continue;
        [row, col] = [voxel[0], voxel[2]];
      } else {
        if (voxel[2] !== sliceIndex) continue;
        [row, col] = [voxel[0], voxel[1]];
      }
      values[row * width + col] = label;
    }
  }
}
