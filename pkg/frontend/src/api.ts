/** Typed client for the positioning service HTTP API.
 *
 * Every anatomical value shown anywhere in the UI originates from one of
 * these responses; the client does no coordinate math of its own.
 */

import type { Axis, Vec3 } from "./geometry.js";

export interface UploadResponse {
  session_id: string;
  dims: Vec3;
  spacing: Vec3;
  origin: Vec3;
  intensity_range: [number, number];
}

export interface QueryResponse {
  normalized: Vec3;
  atlas_point_mm: Vec3;
  label: number;
  label_name: string;
  latency_us: number;
}

export interface LandmarkRequest {
  name?: string;
  target_normalized?: Vec3;
  max_iters?: number;
  starts?: Vec3[];
}

export interface LandmarkResponse {
  point_mm: Vec3;
  path: Vec3[];
  converged: boolean;
  iterations: number;
}

export interface AtlasMetadata {
  reference_point: { name: string; world_mm: Vec3 };
  scale_mm: number;
  landmarks: Record<string, Vec3>;
  labels: Record<string, string>;
}

export class ServiceError extends Error {
  constructor(readonly status: number, readonly detail: unknown) {
    super(typeof detail === "string" ? detail : JSON.stringify(detail));
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class Client {
  constructor(
    readonly base: string,
    private readonly fetchFn: FetchLike = (...a) => fetch(...a),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.base + path, init);
    const body = await resp.json().catch(() => null);
    if (!resp.ok) {
      const detail =
        body && typeof body === "object" && "detail" in body
          ? (body as { detail: unknown }).detail
          : body ?? resp.statusText;
      throw new ServiceError(resp.status, detail);
    }
    return body as T;
  }

  uploadVolume(bytes: Uint8Array): Promise<UploadResponse> {
    return this.request("/volumes", {
      method: "POST",
      headers: { "content-type": "application/octet-stream" },
      body: bytes as unknown as BodyInit,
    });
  }

  sliceUrl(
    sid: string, axis: Axis, index: number, window?: { lo: number; hi: number },
  ): string {
    const w = window ? `&window=${window.lo},${window.hi}` : "";
    return `${this.base}/volumes/${sid}/slice?axis=${axis}&index=${index}${w}`;
  }

  query(sid: string, pointMm: Vec3): Promise<QueryResponse> {
    return this.request(`/volumes/${sid}/query`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ point_mm: pointMm }),
    });
  }

  landmark(sid: string, req: LandmarkRequest): Promise<LandmarkResponse> {
    return this.request(`/volumes/${sid}/landmark`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    });
  }

  atlas(): Promise<AtlasMetadata> {
    return this.request("/atlas");
  }
}
