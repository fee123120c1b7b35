import type {
  CaseMeta, CorrectionResult, ExportResult, Histograms, Slice, SlicePayload,
  SuggestionsDoc, Voxel,
} from "./types.js";

function decodeBase64(data: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(data);
    const bytes = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) bytes[i] = bin.charCodeAt(i);
    return bytes;
  }
  return new Uint8Array(Buffer.from(data, "base64"));
}

function toFloat32(bytes: Uint8Array, dtype: string): Float32Array {
  const buf = bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.byteLength);
  switch (dtype) {
    case "float32":
      return new Float32Array(buf);
    case "uint8":
      return Float32Array.from(new Uint8Array(buf));
    case "int16":
      return Float32Array.from(new Int16Array(buf));
    default:
      throw new Error(`unsupported slice dtype: ${dtype}`);
  }
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

/** Typed client for the review service; the UI's only channel to data. */
export class ApiClient {
  constructor(readonly baseUrl: string) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let resp: Response;
    try {
      resp = await fetch(this.baseUrl + path, init);
    } catch (err) {
      throw new ApiError(0, `service unreachable: ${String(err)}`);
    }
    const body = await resp.text();
    if (!resp.ok) {
      let detail = body;
      try {
        detail = (JSON.parse(body) as { error?: string }).error ?? body;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(resp.status, detail);
    }
    return JSON.parse(body) as T;
  }

  getCase(): Promise<CaseMeta> {
    return this.request<CaseMeta>("/api/case");
  }

  async getSlice(volume: string, axis: number, index: number): Promise<Slice> {
    const payload = await this.request<SlicePayload>(`/api/slice/${volume}/${axis}/${index}`);
    const values = toFloat32(decodeBase64(payload.data), payload.dtype);
    return {
      volume: payload.volume,
      axis: payload.axis,
      index: payload.index,
      height: payload.shape[0],
      width: payload.shape[1],
      values,
      range: payload.range,
    };
  }

  getSuggestions(): Promise<SuggestionsDoc> {
    return this.request<SuggestionsDoc>("/api/suggestions");
  }

  getHistograms(): Promise<Histograms> {
    return this.request<Histograms>("/api/histograms");
  }

  postCorrections(voxels: Voxel[], label: number): Promise<CorrectionResult> {
    return this.request<CorrectionResult>("/api/corrections", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ voxels, label }),
    });
  }

  postExport(): Promise<ExportResult> {
    return this.request<ExportResult>("/api/export", { method: "POST", body: "{}" });
  }
}
