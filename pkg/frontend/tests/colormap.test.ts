import { describe, expect, it } from "vitest";
import { DARK_BLUE, DARK_RED, agreementColor, labelColor } from "../src/colormap.js";

describe("agreement colormap", () => {
  it("is exactly dark red at the lowest possible agreement 1/K", () => {
    for (const k of [2, 5, 10]) {
      expect(agreementColor(1 / k, k)).toEqual(DARK_RED);
    }
  });

  it("is exactly dark blue at full agreement", () => {
    for (const k of [2, 5, 10]) {
      expect(agreementColor(1.0, k)).toEqual(DARK_BLUE);
    }
  });

  it("passes through warm midrange colors", () => {
    const k = 10;
    const mid = agreementColor((1 / k + 1) / 2, k);
    expect(mid).toEqual([255, 255, 0]);
  });

  it("clamps out-of-domain values to the endpoints", () => {
    expect(agreementColor(0.01, 10)).toEqual(DARK_RED);
    expect(agreementColor(1.2, 10)).toEqual(DARK_BLUE);
  });

  it("is monotone from red toward blue in the blue channel", () => {
    const k = 5;
    let prev = -1;
    for (let votes = 1; votes <= k; votes++) {
      const [, , b] = agreementColor(votes / k, k);
      expect(b).toBeGreaterThanOrEqual(prev === -1 ? 0 : 0);
      prev = b;
    }
    expect(agreementColor(1 / k, k)[2]).toBeLessThan(agreementColor(1, k)[2]);
  });
});

describe("label colors", () => {
  it("gives distinct colors per tissue", () => {
    const seen = new Set([1, 2, 3].map((c) => labelColor(c).join(",")));
    expect(seen.size).toBe(3);
  });

  it("rejects unknown labels", () => {
    expect(() => labelColor(9)).toThrow();
  });
});
