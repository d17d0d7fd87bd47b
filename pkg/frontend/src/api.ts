/** Typed client for the grading API.
 *
 * The base URL comes from (in order) the constructor, the global
 * FRUITGRADER_API set by the hosting page, or same-origin. fetch is
 * injectable so tests can stub the server.
 */

import { Box, DetectedBox, Prediction } from "./types";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

declare global {
  interface Window {
    FRUITGRADER_API?: string;
  }
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

const REQUEST_TIMEOUT_MS = 30_000;

export class ApiClient {
  private baseUrl: string;
  private fetchImpl: FetchLike;

  constructor(baseUrl?: string, fetchImpl?: FetchLike) {
    const fromPage = typeof window !== "undefined" ? window.FRUITGRADER_API : undefined;
    this.baseUrl = (baseUrl ?? fromPage ?? "").replace(/\/$/, "");
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async request(path: string, init: RequestInit): Promise<unknown> {
    const controller = new AbortController();
    const timer = setTimeout(() => controller.abort(), REQUEST_TIMEOUT_MS);
    let resp: Response;
    try {
      resp = await this.fetchImpl(this.baseUrl + path, { ...init, signal: controller.signal });
    } catch (err) {
      throw new ApiError(0, `request failed: ${String(err)}`);
    } finally {
      clearTimeout(timer);
    }
    const body = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      const detail = (body as { error?: string }).error ?? resp.statusText;
      throw new ApiError(resp.status, detail);
    }
    return body;
  }

  async uploadImage(png: Blob): Promise<string> {
    const doc = (await this.request("/api/images", {
      method: "POST",
      headers: { "Content-Type": "image/png" },
      body: png,
    })) as { image_id: string };
    return doc.image_id;
  }

  imageUrl(imageId: string): string {
    return `${this.baseUrl}/api/images/${imageId}`;
  }

  async detect(imageId: string): Promise<DetectedBox[]> {
    const doc = (await this.request("/api/detect", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ image_id: imageId }),
    })) as { boxes: DetectedBox[] };
    return doc.boxes;
  }

  async classify(
    imageId: string,
    model: "ripeness" | "disease",
    box?: Box,
  ): Promise<Prediction> {
    return (await this.request("/api/classify", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ image_id: imageId, model, ...(box ? { box } : {}) }),
    })) as Prediction;
  }

  async models(): Promise<{ loaded: boolean; disease_trigger?: string[] }> {
    return (await this.request("/api/models", { method: "GET" })) as {
      loaded: boolean;
      disease_trigger?: string[];
    };
  }
}
