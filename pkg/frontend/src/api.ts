/** Typed client for the aimface editing service.
 *
 * All heavy data moves as little-endian float32 buffers with counts in
 * headers; JSON is metadata only. The transport is injectable so tests can
 * run the full client against an in-memory service.
 */

export interface TransportResponse {
  status: number;
  header(name: string): string | null;
  arrayBuffer(): Promise<ArrayBuffer>;
  json(): Promise<unknown>;
}

export type Transport = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<TransportResponse>;

export const fetchTransport: Transport = async (url, init) => {
  const res = await fetch(url, init);
  return {
    status: res.status,
    header: (name) => res.headers.get(name),
    arrayBuffer: () => res.arrayBuffer(),
    json: () => res.json(),
  };
};

export interface SymmetryPlane {
  normal: [number, number, number];
  offset: number;
}

export interface ModelMeta {
  vertex_count: number;
  face_count: number;
  face_digest: string;
  n_shapes: number;
  bbox: { min: [number, number, number]; max: [number, number, number] };
  symmetry_plane: SymmetryPlane | null;
}

/** Rigid transform wire format: 6D rotation seed followed by translation. */
export type Transform9 = [
  number, number, number, number, number, number, number, number, number,
];

export interface PoseRequest {
  head?: Transform9 | null;
  jaw?: Transform9 | null;
  coeffs?: number[] | null;
}

export interface VertexBuffer {
  vertices: Float32Array; // xyz interleaved, vertexCount * 3 entries
  vertexCount: number;
  revision: number;
}

export interface AnatomyBuffers {
  bone: Float32Array; // (V*3)
  thickness: Float32Array; // (V)
  normal: Float32Array; // (V*3)
  skinning: Float32Array; // (V)
  vertexCount: number;
}

export class ServiceError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(`service ${status}: ${detail}`);
  }
}

async function errorDetail(res: TransportResponse): Promise<string> {
  try {
    const body = (await res.json()) as { detail?: unknown };
    if (body && typeof body.detail === "string") return body.detail;
    return JSON.stringify(body);
  } catch {
    return "(no detail)";
  }
}

function intHeader(res: TransportResponse, name: string): number {
  const raw = res.header(name);
  if (raw === null) throw new ServiceError(res.status, `missing ${name} header`);
  const value = Number(raw);
  if (!Number.isInteger(value) || value < 0) {
    throw new ServiceError(res.status, `bad ${name} header: ${raw}`);
  }
  return value;
}

export class ServiceClient {
  constructor(
    readonly baseUrl: string,
    readonly sessionId: string = "default",
    private readonly transport: Transport = fetchTransport,
  ) {}

  private async request(
    path: string,
    init?: { method?: string; body?: string },
  ): Promise<TransportResponse> {
    const headers: Record<string, string> = { "x-session-id": this.sessionId };
    if (init?.body !== undefined) headers["content-type"] = "application/json";
    const res = await this.transport(this.baseUrl + path, {
      method: init?.method ?? "GET",
      headers,
      body: init?.body,
    });
    if (res.status < 200 || res.status >= 300) {
      throw new ServiceError(res.status, await errorDetail(res));
    }
    return res;
  }

  async meta(): Promise<ModelMeta> {
    const res = await this.request("/model/meta");
    return (await res.json()) as ModelMeta;
  }

  async faces(): Promise<Uint32Array> {
    const res = await this.request("/model/faces");
    const count = intHeader(res, "x-face-count");
    const data = new Uint32Array(await res.arrayBuffer());
    if (data.length !== count * 3) {
      throw new ServiceError(
        res.status,
        `face buffer holds ${data.length} indices, expected ${count * 3}`,
      );
    }
    return data;
  }

  private async vertexResponse(res: TransportResponse): Promise<VertexBuffer> {
    const vertexCount = intHeader(res, "x-vertex-count");
    const revision = intHeader(res, "x-revision");
    const vertices = new Float32Array(await res.arrayBuffer());
    if (vertices.length !== vertexCount * 3) {
      throw new ServiceError(
        res.status,
        `vertex buffer holds ${vertices.length} floats, expected ${vertexCount * 3}`,
      );
    }
    return { vertices, vertexCount, revision };
  }

  /** Pose the surface. Equal payloads always return equal buffers. */
  async evaluate(pose: PoseRequest = {}): Promise<VertexBuffer> {
    const res = await this.request("/evaluate", {
      method: "POST",
      body: JSON.stringify(pose),
    });
    return this.vertexResponse(res);
  }

  /** Apply an absolute masked thickness scale on top of the current pose. */
  async editThickness(
    mask: Iterable<number>,
    scale: number,
  ): Promise<VertexBuffer> {
    const res = await this.request("/edit/thickness", {
      method: "POST",
      body: JSON.stringify({ mask: [...mask], scale }),
    });
    return this.vertexResponse(res);
  }

  async anatomy(): Promise<AnatomyBuffers> {
    const res = await this.request("/anatomy");
    const vertexCount = intHeader(res, "x-vertex-count");
    const layout = res.header("x-buffer-layout") ?? "";
    const fields = layout.split(",").map((part) => {
      const [name, width] = part.split(":");
      return { name, width: Number(width) };
    });
    const floats = new Float32Array(await res.arrayBuffer());
    const expected = fields.reduce((n, f) => n + f.width * vertexCount, 0);
    if (
      fields.some((f) => !f.name || !Number.isInteger(f.width)) ||
      floats.length !== expected
    ) {
      throw new ServiceError(
        res.status,
        `anatomy buffer/layout mismatch: layout "${layout}", ${floats.length} floats`,
      );
    }
    const blocks: Record<string, Float32Array> = {};
    let offset = 0;
    for (const f of fields) {
      blocks[f.name] = floats.subarray(offset, offset + f.width * vertexCount);
      offset += f.width * vertexCount;
    }
    for (const name of ["bone", "thickness", "normal", "skinning"]) {
      if (!(name in blocks)) {
        throw new ServiceError(res.status, `anatomy layout missing "${name}"`);
      }
    }
    return {
      bone: blocks["bone"],
      thickness: blocks["thickness"],
      normal: blocks["normal"],
      skinning: blocks["skinning"],
      vertexCount,
    };
  }
}
