import type { CaseMeta, Suggestion, SuggestionsDoc, Voxel } from "./types.js";

export type Axis = 0 | 1 | 2;

export interface LayerState {
  name: string;
  visible: boolean;
  opacity: number;
}

/** Row/column axes of the slice plane for a given slicing axis. */
export function planeAxes(axis: Axis): [number, number] {
  if (axis === 0) return [1, 2];
  if (axis === 1) return [0, 2];
  return [0, 1];
}

export function voxelAt(axis: Axis, index: number, row: number, col: number): Voxel {
  if (axis === 0) return [index, row, col];
  if (axis === 1) return [row, index, col];
  return [row, col, index];
}

export interface OutlineRect {
  row0: number;
  col0: number;
  row1: number;
  col1: number;
}

const DEFAULT_OPACITY: Record<string, number> = {
  t1: 1.0, t2: 0.0, fused: 0.45, agreement: 0.0, truth: 0.0,
};

/**
 * All view state of the reviewer session. Mutations clamp to volume bounds
 * and keep at most one suggestion active.
 */
export class ViewerState {
  readonly dims: [number, number, number];
  axis: Axis = 2;
  sliceIndex: number;
  layers: LayerState[];
  suggestions: Suggestion[] = [];
  selectedRank: number | null = null;
  brushRadius = 0;
  activeLabel = 1;
  pendingCorrections = 0;

  constructor(readonly meta: CaseMeta) {
    this.dims = meta.dims;
    this.sliceIndex = Math.floor(this.dims[this.axis] / 2);
    this.layers = meta.volumes.map((name) => ({
      name,
      visible: (DEFAULT_OPACITY[name] ?? 0) > 0,
      opacity: DEFAULT_OPACITY[name] ?? 0.5,
    }));
  }

  sliceCount(): number {
    return this.dims[this.axis];
  }

  setAxis(axis: Axis): void {
    this.axis = axis;
    this.setSlice(Math.floor(this.dims[axis] / 2));
  }

  setSlice(index: number): void {
    const max = this.sliceCount() - 1;
    this.sliceIndex = Math.min(Math.max(Math.round(index), 0), max);
  }

  layer(name: string): LayerState {
    const found = this.layers.find((l) => l.name === name);
    if (!found) throw new Error(`unknown layer: ${name}`);
    return found;
  }

  setSuggestions(doc: SuggestionsDoc): void {
    this.suggestions = [...doc.suggestions].sort((a, b) => a.rank - b.rank);
    if (this.selectedRank !== null
        && !this.suggestions.some((s) => s.rank === this.selectedRank)) {
      this.selectedRank = null;
    }
  }

  suggestion(rank: number): Suggestion {
    const found = this.suggestions.find((s) => s.rank === rank);
    if (!found) throw new Error(`no suggestion with rank ${rank}`);
    return found;
  }

  /** Navigate to the slice through the suggestion's bbox center and turn the
   * agreement overlay on. Exactly one suggestion stays selected. */
  jumpToSuggestion(rank: number): void {
    const s = this.suggestion(rank);
    this.selectedRank = rank;
    const center = Math.floor((s.bbox[this.axis] + s.bbox[this.axis + 3]) / 2);
    this.setSlice(center);
    const agreement = this.layer("agreement");
    agreement.visible = true;
    if (agreement.opacity === 0) agreement.opacity = 0.5;
  }

  clearSelection(): void {
    this.selectedRank = null;
  }

  /** Bbox rectangle in the current slice plane, or null when the slice
   * does not cut the suggestion's bounding box. */
  suggestionOutline(s: Suggestion): OutlineRect | null {
    if (this.sliceIndex < s.bbox[this.axis] || this.sliceIndex > s.bbox[this.axis + 3]) {
      return null;
    }
    const [rowAxis, colAxis] = planeAxes(this.axis);
    return {
      row0: s.bbox[rowAxis],
      col0: s.bbox[colAxis],
      row1: s.bbox[rowAxis + 3],
      col1: s.bbox[colAxis + 3],
    };
  }

  snapshot(): object {
    return {
      axis: this.axis,
      sliceIndex: this.sliceIndex,
      layers: this.layers.map((l) => ({ ...l })),
      selectedRank: this.selectedRank,
      brushRadius: this.brushRadius,
      activeLabel: this.activeLabel,
      pendingCorrections: this.pendingCorrections,
    };
  }
}
