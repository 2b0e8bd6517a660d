import type { QueryBody, ReportSnapshot, SchemaInfo } from "./types.js";

export class GatewayError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "GatewayError";
  }
}

export interface CreateReportRequest {
  query: QueryBody;
  threshold?: number;
  subClusterSize?: number;
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

function asNumber(value: unknown, field: string): number {
  if (typeof value !== "number" || !Number.isFinite(value)) {
    throw new GatewayError(0, `malformed response: ${field} is not a number`);
  }
  return value;
}

/** Thin JSON client for the aggregator gateway. */
export class GatewayClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    let response: Response;
    try {
      response = await this.fetchFn(this.baseUrl + path, init);
    } catch (err) {
      throw new GatewayError(0, `gateway unreachable: ${String(err)}`);
    }
    let body: unknown = null;
    try {
      body = await response.json();
    } catch {
      throw new GatewayError(response.status, "malformed response: not JSON");
    }
    if (!response.ok) {
      const detail =
        body && typeof body === "object" && "error" in body
          ? String((body as { error: unknown }).error)
          : response.statusText;
      throw new GatewayError(response.status, detail);
    }
    return body;
  }

  async schema(): Promise<SchemaInfo> {
    const body = (await this.request("/schema")) as SchemaInfo;
    if (!Array.isArray(body.features)) {
      throw new GatewayError(0, "malformed response: features missing");
    }
    return body;
  }

  async createReport(request: CreateReportRequest): Promise<string> {
    const body = (await this.request("/reports", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
    })) as { reportId?: unknown };
    if (typeof body.reportId !== "string") {
      throw new GatewayError(0, "malformed response: reportId missing");
    }
    return body.reportId;
  }

  async fetchReport(reportId: string): Promise<ReportSnapshot> {
    const body = (await this.request(`/reports/${reportId}`)) as Record<string, unknown>;
    const status = body["status"];
    if (status !== "running" && status !== "done" && status !== "cancelled") {
      throw new GatewayError(0, `malformed response: unknown status ${String(status)}`);
    }
    return {
      estimate: asNumber(body["estimate"], "estimate"),
      margin: asNumber(body["margin"], "margin"),
      fractionScanned: asNumber(body["fractionScanned"], "fractionScanned"),
      rowsMatched: asNumber(body["rowsMatched"], "rowsMatched"),
      status,
    };
  }
}
