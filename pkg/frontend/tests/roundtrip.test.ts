/** The editor's launch criterion: painting a mask, scaling thickness to 2,
 * then back to 1 must hand back the exact baseline buffer, and the
 * displayed displacement magnitudes must equal the anatomy thickness to
 * float32 rounding. Runs the real client + controller against the
 * in-memory service. */

import { describe, expect, it } from "vitest";
import { ServiceClient } from "../src/api.js";
import { EditorController } from "../src/state.js";
import { bufferChecksum } from "../src/util.js";
import { createMockService } from "./mockService.js";

const F32_ULP = Math.pow(2, -23);

function bytesOf(v: Float32Array): Uint8Array {
  return new Uint8Array(v.buffer.slice(0), v.byteOffset, v.byteLength);
}

async function editorWithMask(maskSize = 30) {
  const mock = createMockService();
  const heats: (Float32Array | null)[] = [];
  const errors: string[] = [];
  const client = new ServiceClient("http://mock", "roundtrip", mock.transport);
  const controller = new EditorController(client, {
    onHeat: (h) => heats.push(h),
    onError: (m) => errors.push(m),
  });
  await controller.connect();
  const mask: number[] = [];
  for (let i = 0; i < maskSize; i++) mask.push(3 + 2 * i);
  controller.state.mask.applyStroke(mask, "paint");
  return { mock, controller, heats, errors, mask };
}

describe("paint / scale / restore round trip", () => {
  it("scale 2 then scale 1 returns the exact baseline buffer", async () => {
    const { controller, errors } = await editorWithMask();
    const baseline = controller.state.displayed!;
    const baselineBytes = bytesOf(baseline);
    const baselineSum = bufferChecksum(baseline);

    await controller.applyThickness(2);
    const inflated = controller.state.displayed!;
    expect(bufferChecksum(inflated)).not.toBe(baselineSum);

    await controller.applyThickness(1);
    const restored = controller.state.displayed!;
    expect(errors).toEqual([]);
    expect(bufferChecksum(restored)).toBe(baselineSum);
    expect(bytesOf(restored)).toEqual(baselineBytes);
  });

  it("edits are absolute: repeating scale 2 never compounds", async () => {
    const { controller } = await editorWithMask();
    await controller.applyThickness(2);
    const first = bufferChecksum(controller.state.displayed!);
    await controller.applyThickness(2);
    await controller.applyThickness(2);
    expect(bufferChecksum(controller.state.displayed!)).toBe(first);
  });

  it("displayed displacement equals anatomy thickness to float32 rounding", async () => {
    const { controller, heats, mask } = await editorWithMask();
    await controller.applyThickness(2);
    const heat = heats[heats.length - 1]!;
    expect(heat).not.toBeNull();
    const anatomy = controller.state.anatomy!;
    const masked = new Set(mask);

    // Coordinates sit at scale ~1, so a handful of float32 ulps at that
    // scale bounds the serialization error of the two buffers.
    const tol = 16 * F32_ULP;
    let worst = 0;
    for (let i = 0; i < heat.length; i++) {
      if (masked.has(i)) {
        worst = Math.max(worst, Math.abs(heat[i] - anatomy.thickness[i]));
      } else {
        expect(heat[i]).toBe(0); // untouched vertices: identical buffers
      }
    }
    expect(worst).toBeLessThan(tol);
  });

  it("scale 1 keeps the displayed surface visually identical (zero heat)", async () => {
    const { controller, heats } = await editorWithMask();
    await controller.applyThickness(1);
    const heat = heats[heats.length - 1]!;
    for (let i = 0; i < heat.length; i++) expect(heat[i]).toBe(0);
  });
});
