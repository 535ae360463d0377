/** Client-side wire contract: headers, buffer shapes, error surfacing,
 * and the composition rule reconstructed from the anatomy buffers. */

import { describe, expect, it } from "vitest";
import { ServiceClient, ServiceError } from "../src/api.js";
import { createMockService } from "./mockService.js";

const F32_ULP = Math.pow(2, -23);

function client(mock = createMockService(), session = "t") {
  return new ServiceClient("http://mock", session, mock.transport);
}

describe("service client", () => {
  it("reads model metadata", async () => {
    const mock = createMockService();
    const meta = await client(mock).meta();
    expect(meta.vertex_count).toBe(mock.model.vertexCount);
    expect(meta.face_count).toBe(mock.model.faces.length / 3);
    expect(meta.n_shapes).toBe(mock.model.nShapes);
    expect(meta.symmetry_plane).not.toBeNull();
    expect(meta.bbox.min.length).toBe(3);
  });

  it("fetches the triangle buffer with its count header honored", async () => {
    const mock = createMockService();
    const faces = await client(mock).faces();
    expect(faces).toEqual(mock.model.faces);
  });

  it("sends the session header on every request", async () => {
    const mock = createMockService();
    const c = client(mock, "artist-42");
    await c.meta();
    await c.evaluate({});
    expect(mock.log.map(([, , sid]) => sid)).toEqual(["artist-42", "artist-42"]);
  });

  it("identical evaluate payloads return identical vertex buffers", async () => {
    const mock = createMockService();
    const c = client(mock);
    const pose = { coeffs: [0.5, 0, 0.25] };
    const a = await c.evaluate(pose);
    const b = await c.evaluate(pose);
    expect(b.revision).toBeGreaterThan(a.revision);
    expect(b.vertices).toEqual(a.vertices);
  });

  it("parses the anatomy layout into per-field blocks", async () => {
    const mock = createMockService();
    const a = await client(mock).anatomy();
    const n = mock.model.vertexCount;
    expect(a.vertexCount).toBe(n);
    expect(a.bone.length).toBe(n * 3);
    expect(a.thickness.length).toBe(n);
    expect(a.normal.length).toBe(n * 3);
    expect(a.skinning.length).toBe(n);
    for (let i = 0; i < n; i++) {
      expect(a.thickness[i]).toBe(Math.fround(mock.model.thickness[i]));
    }
  });

  it("anatomy buffers reconstruct the surface: skin = bone + d * n", async () => {
    const mock = createMockService();
    const c = client(mock);
    const a = await c.anatomy();
    const skin = (await c.evaluate({})).vertices;
    let worst = 0;
    for (let i = 0; i < a.vertexCount; i++) {
      for (let k = 0; k < 3; k++) {
        const built = a.bone[3 * i + k] + a.thickness[i] * a.normal[3 * i + k];
        worst = Math.max(worst, Math.abs(built - skin[3 * i + k]));
      }
    }
    expect(worst).toBeLessThan(8 * F32_ULP);
  });

  it("surfaces service errors with status and detail", async () => {
    const mock = createMockService();
    mock.failNext("/edit/thickness", 422, "scale must be finite and >= 0");
    const err = await client(mock)
      .editThickness([1, 2], NaN)
      .catch((e) => e);
    expect(err).toBeInstanceOf(ServiceError);
    expect((err as ServiceError).status).toBe(422);
    expect(String(err)).toContain("scale must be finite");
  });

  it("rejects out-of-range mask indices server-side", async () => {
    const mock = createMockService();
    const err = await client(mock)
      .editThickness([mock.model.vertexCount + 5], 2)
      .catch((e) => e);
    expect(err).toBeInstanceOf(ServiceError);
    expect((err as ServiceError).status).toBe(422);
  });
});
