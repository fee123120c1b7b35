import { ApiClient, ApiError } from "./api.js";
import { CorrectionOverlay, brushVoxels } from "./brush.js";
import { agreementColor } from "./colormap.js";
import { compositeSlice, drawOutline, type LayerPixels } from "./render.js";
import { ViewerState, type Axis } from "./state.js";
import type { Slice, Voxel } from "./types.js";

const AXIS_NAMES = ["X", "Y", "Z"];
const SCALE = 8; // canvas pixels per voxel

class ReviewApp {
  private api: ApiClient;
  private state!: ViewerState;
  private overlay = new CorrectionOverlay();
  private sliceCache = new Map<string, Slice>();
  private canvas: HTMLCanvasElement;
  private strokes: Voxel[] = [];
  private painting = false;

  constructor(baseUrl: string, private root: HTMLElement) {
    this.api = new ApiClient(baseUrl);
    this.canvas = document.createElement("canvas");
  }

  async start(): Promise<void> {
    let meta;
    try {
      meta = await this.api.getCase();
    } catch (err) {
      this.showBanner(`cannot reach review service: ${(err as Error).message}`, true);
      return;
    }
    this.state = new ViewerState(meta);
    this.state.setSuggestions(await this.api.getSuggestions());
    this.buildDom();
    await this.redraw();
  }

  private showBanner(text: string, isError = false): void {
    let banner = document.getElementById("banner");
    if (!banner) {
      banner = document.createElement("div");
      banner.id = "banner";
      this.root.prepend(banner);
    }
    banner.textContent = text;
    banner.className = isError ? "banner error" : "banner";
  }

  private buildDom(): void {
    const meta = this.state.meta;
    this.root.innerHTML = "";
    const title = document.createElement("h2");
    title.textContent = `case ${meta.id} - K=${meta.k}, threshold ${meta.threshold}`;
    this.root.append(title);

    const controls = document.createElement("div");
    controls.className = "controls";

    // axis buttons + slice slider
    const axisBox = document.createElement("span");
    AXIS_NAMES.forEach((name, axis) => {
      const btn = document.createElement("button");
      btn.textContent = name;
      btn.onclick = () => {
        this.state.setAxis(axis as Axis);
        slider.max = String(this.state.sliceCount() - 1);
        slider.value = String(this.state.sliceIndex);
        void this.redraw();
      };
      axisBox.append(btn);
    });
    const slider = document.createElement("input");
    slider.type = "range";
    slider.min = "0";
    slider.max = String(this.state.sliceCount() - 1);
    slider.value = String(this.state.sliceIndex);
    slider.oninput = () => {
      this.state.setSlice(Number(slider.value));
      void this.redraw();
    };
    controls.append(axisBox, slider);

    // layer opacity controls
    for (const layer of this.state.layers) {
      const label = document.createElement("label");
      label.textContent = layer.name;
      const box = document.createElement("input");
      box.type = "checkbox";
      box.checked = layer.visible;
      box.onchange = () => {
        layer.visible = box.checked;
        void this.redraw();
      };
      const op = document.createElement("input");
      op.type = "range";
      op.min = "0";
      op.max = "100";
      op.value = String(layer.opacity * 100);
      op.oninput = () => {
        layer.opacity = Number(op.value) / 100;
        void this.redraw();
      };
      label.prepend(box);
      label.append(op);
      controls.append(label);
    }

    // brush radius + label picker + export
    const brush = document.createElement("input");
    brush.type = "number";
    brush.min = "0";
    brush.max = "10";
    brush.value = "0";
    brush.onchange = () => {
      this.state.brushRadius = Number(brush.value);
    };
    const labelSel = document.createElement("select");
    meta.classes.forEach((name, i) => {
      const opt = document.createElement("option");
      opt.value = String(i);
      opt.textContent = `${i}: ${name}`;
      if (i === this.state.activeLabel) opt.selected = true;
      labelSel.append(opt);
    });
    labelSel.onchange = () => {
      this.state.activeLabel = Number(labelSel.value);
    };
    const exportBtn = document.createElement("button");
    exportBtn.textContent = "export corrections";
    exportBtn.onclick = () => void this.exportCase();
    controls.append(" brush ", brush, labelSel, exportBtn);
    this.root.append(controls);

    // suggestion queue in rank order
    const queue = document.createElement("ol");
    queue.className = "suggestions";
    for (const s of this.state.suggestions) {
      const li = document.createElement("li");
      li.textContent = `agreement ${s.mean_agreement.toFixed(2)}, `
        + `${s.size} voxels, class ${meta.classes[s.dominant_class]}`;
      const swatch = document.createElement("span");
      const [r, g, b] = agreementColor(s.mean_agreement, meta.k);
      swatch.style.background = `rgb(${r},${g},${b})`;
      swatch.className = "swatch";
      li.prepend(swatch);
      li.onclick = () => {
        this.state.jumpToSuggestion(s.rank);
        slider.value = String(this.state.sliceIndex);
        void this.redraw();
      };
      queue.append(li);
    }
    this.root.append(queue);

    this.canvas.addEventListener("pointerdown", (ev) => this.onPaint(ev, true));
    this.canvas.addEventListener("pointermove", (ev) => this.onPaint(ev, false));
    window.addEventListener("pointerup", () => void this.flushStroke());
    this.root.append(this.canvas);
  }

  private async fetchSlice(volume: string): Promise<Slice> {
    const key = `${volume}/${this.state.axis}/${this.state.sliceIndex}`;
    const cached = this.sliceCache.get(key);
    if (cached) return cached;
    const slice = await this.api.getSlice(volume, this.state.axis, this.state.sliceIndex);
    this.sliceCache.set(key, slice);
    return slice;
  }

  private invalidateFused(): void {
    for (const key of [...this.sliceCache.keys()]) {
      if (key.startsWith("fused/")) this.sliceCache.delete(key);
    }
  }

  private async redraw(): Promise<void> {
    const visible = this.state.layers.filter((l) => l.visible && l.opacity > 0);
    const slices = await Promise.all(visible.map((l) => this.fetchSlice(l.name)));
    if (!slices.length) return;
    const { width, height } = slices[0];
    const layers: LayerPixels[] = slices.map((slice, i) => {
      const name = visible[i].name;
      let values = slice.values;
      if (name === "fused") {
        values = Float32Array.from(values);
        this.overlay.applyToSlice(values, this.state.axis, this.state.sliceIndex, width);
      }
      return {
        kind: name === "agreement" ? "agreement"
          : name === "fused" || name === "truth" ? "labels" : "gray",
        values,
        opacity: visible[i].opacity,
        range: slice.range,
        k: this.state.meta.k,
      } as LayerPixels;
    });
    const buf = compositeSlice(width, height, layers);
    if (this.state.selectedRank !== null) {
      const rect = this.state.suggestionOutline(
        this.state.suggestion(this.state.selectedRank));
      if (rect) drawOutline(buf, width, height, rect);
    }

    this.canvas.width = width * SCALE;
    this.canvas.height = height * SCALE;
    const ctx = this.canvas.getContext("2d")!;
    const img = new ImageData(buf, width, height);
    void createImageBitmap(img).then((bmp) => {
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(bmp, 0, 0, this.canvas.width, this.canvas.height);
    });
  }

  private onPaint(ev: PointerEvent, begin: boolean): void {
    if (begin) this.painting = true;
    if (!this.painting || (!begin && ev.buttons === 0)) return;
    const rect = this.canvas.getBoundingClientRect();
    const col = Math.floor((ev.clientX - rect.left) / rect.width
      * (this.canvas.width / SCALE));
    const row = Math.floor((ev.clientY - rect.top) / rect.height
      * (this.canvas.height / SCALE));
    const voxels = brushVoxels(this.state.axis, this.state.sliceIndex, row, col,
                               this.state.brushRadius, this.state.dims);
    if (!voxels.length) return;
    this.overlay.paint(voxels, this.state.activeLabel);
    this.strokes.push(...voxels);
    void this.redraw();
  }

  private async flushStroke(): Promise<void> {
    this.painting = false;
    if (!this.strokes.length) return;
    const voxels = this.strokes;
    this.strokes = [];
    try {
      const res = await this.api.postCorrections(voxels, this.state.activeLabel);
      this.state.pendingCorrections = res.total_corrections;
      this.invalidateFused();
      this.showBanner(`${res.total_corrections} corrections applied`);
    } catch (err) {
      this.overlay.erase(voxels); // rollback optimistic paint
      void this.redraw();
      const msg = err instanceof ApiError ? err.message : String(err);
      this.showBanner(`correction rejected: ${msg}`, true);
    }
  }

  private async exportCase(): Promise<void> {
    try {
      const res = await this.api.postExport();
      this.showBanner(
        `exported ${res.num_corrections} corrections to ${res.labels_native}`);
    } catch (err) {
      this.showBanner(`export failed: ${(err as Error).message}`, true);
    }
  }
}

const root = document.getElementById("app");
if (root) {
  void new ReviewApp(window.location.origin, root).start();
}
