"""
SER (Success, Error, Response) envelopes shared by every API view.
"""

from rest_framework import status as http_status
from rest_framework.response import Response
from rest_framework.views import exception_handler

from core.exceptions import FasterError


def SuccessResponse(data=None, status=None, headers=None):
    payload = {
        "success": True,
        "response": data if data is not None else {},
        "error": None,
    }
    return Response(payload, status=status or http_status.HTTP_200_OK, headers=headers)


def ErrorResponse(
    error_message="An error occurred",
    error_details=None,
    status=None,
    status_code=None,
    data=None,
    headers=None,
):
    """
    Error response model to standardize error responses across the application.
    Args:
        error_message (str): A brief message describing the error.
        error_details (dict or list, optional): Additional details about the error.
        status (int, optional): HTTP status code for the response.
        status_code (int, optional): Alias of status.
        data (any, optional): Additional data to include in the response.
        headers (dict, optional): Additional headers for the response.
    Returns:
        Response: A DRF Response object with the standardized error format.

    Expected Output:
        {
            "success": False,
            "response": null,
            "error": {
                "message": "Execution horizon s=1 is infeasible",
                "details": {"mode": "async_naive"}
            }
        }
    """

    payload = {
        "success": False,
        "response": data,
        "error": {
            "message": error_message,
            "details": error_details,
        },
    }
    return Response(
        payload,
        status=status or status_code or http_status.HTTP_400_BAD_REQUEST,
        headers=headers,
    )


def faster_exception_handler(exc, context):
    """
    DRF exception handler: domain errors become 400 SER envelopes, everything
    else goes through DRF's default handling (and the wrapper middleware).
    """
    if isinstance(exc, FasterError):
        return ErrorResponse(
            error_message=exc.message,
            error_details=exc.details,
            status=http_status.HTTP_400_BAD_REQUEST,
        )
    return exception_handler(exc, context)
